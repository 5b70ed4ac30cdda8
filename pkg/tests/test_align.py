import numpy
import pytest

from flowalign import ConfigurationError, InputError, NumericError
from flowalign.align import (AlignBatch, DpoConfig, RelabeledPair, align_train, dpo_inner, flow_dpo_loss,
                             flow_rwr_loss, pairs_from_records, read_relabeled, rwr_weights, sft_loss,
                             write_relabeled)
from flowalign.analytic import ConstantField
from flowalign.flow import FlowBatch, fm_loss, velocity_net_init
from flowalign.netcore import finite_diff_check
from flowalign.toyworld import AnnotatorModel, KnobDistribution, Label, build_pref_dataset


class Fixed(ConstantField):
    def grads(self, x, t, y, upstream, dropped=None):
        return numpy.zeros(1), numpy.zeros_like(x)


def small_net(seed=0):
    return velocity_net_init(2, 3, hidden=(5,), activation="tanh", seed=seed)


def random_batch(seed=0, n=4):
    rng = numpy.random.default_rng(seed)
    return AlignBatch.draw(rng.standard_normal((n, 2)), rng.standard_normal((n, 2)),
                           rng.integers(3, size=n), rng)


def test_hand_example():
    # v_w = 1, v_l = -1 with one shared noise draw
    batch = AlignBatch(numpy.array([[0.0]]), numpy.array([[2.0]]), numpy.array([0]),
                       numpy.array([0.3]), numpy.array([[1.0]]))
    assert batch.v_w == pytest.approx([[1.0]])
    assert batch.v_l == pytest.approx([[-1.0]])
    cfg = DpoConfig(beta=2.0)
    inner, _, _, _ = dpo_inner(Fixed(1.0, 1), Fixed(0.0, 1), batch, cfg)
    assert inner == pytest.approx([4.0])
    loss, _ = flow_dpo_loss(Fixed(1.0, 1), Fixed(0.0, 1), batch, cfg)
    assert loss == pytest.approx(numpy.log1p(numpy.exp(-4.0)))
    assert loss == pytest.approx(0.0181, abs=1e-4)


@pytest.mark.parametrize("schedule", ["constant", "quadratic"])
def test_policy_equal_reference(schedule):
    net = small_net(seed=1)
    loss, _ = flow_dpo_loss(net, net, random_batch(), DpoConfig(beta=500, schedule=schedule))
    assert loss == pytest.approx(numpy.log(2))


def test_quadratic_schedule_vanishes_at_noise():
    batch = random_batch(seed=2)
    batch = AlignBatch(batch.x0_w, batch.x0_l, batch.y, numpy.ones(len(batch)), batch.eps)
    cfg = DpoConfig(beta=1000, schedule="quadratic")
    loss, grad = flow_dpo_loss(small_net(seed=3), small_net(seed=4), batch, cfg)
    assert loss == pytest.approx(numpy.log(2))
    assert (grad == 0).all()
    _, grad = flow_dpo_loss(small_net(seed=3), small_net(seed=4), batch, DpoConfig(beta=1000))
    assert numpy.abs(grad).max() > 0
    assert cfg.beta_at([0.0, 0.5, 1.0]) == pytest.approx([1000, 250, 0])
    assert DpoConfig(beta=7).beta_at([0.2, 0.9]) == pytest.approx([7, 7])


class Branches(Fixed):
    """Velocity `chosen` below x = 1 and `rejected` above"""

    def __init__(self, chosen, rejected):
        super().__init__(0.0, 1)
        self.chosen, self.rejected = chosen, rejected

    def __call__(self, x, t, y, dropped=None):
        return numpy.where(x < 1, self.chosen, self.rejected)


def test_loss_falls_as_chosen_error_falls():
    # x_t = 0.3 on the chosen branch and 1.7 on the rejected one; v_w = 1, v_l = -1
    batch = AlignBatch(numpy.array([[0.0]]), numpy.array([[2.0]]), numpy.array([0]),
                       numpy.array([0.3]), numpy.array([[1.0]]))
    ref, cfg = Fixed(0.0, 1), DpoConfig(beta=2.0)
    losses = [flow_dpo_loss(Branches(chosen, -0.5), ref, batch, cfg)[0]
              for chosen in (-1.0, 0.0, 0.5, 0.9, 1.0)]
    assert numpy.all(numpy.diff(losses) < 0)
    # a worse rejected branch lowers the loss too
    assert flow_dpo_loss(Branches(1.0, 0.5), ref, batch, cfg)[0] < losses[-1]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        DpoConfig(beta=0)
    with pytest.raises(ConfigurationError):
        DpoConfig(schedule="cosine")
    with pytest.raises(ConfigurationError):
        DpoConfig(rwr_clip=-1)


@pytest.mark.parametrize("schedule", ["constant", "quadratic"])
def test_dpo_gradient(schedule):
    policy, ref = small_net(seed=5), small_net(seed=6)
    batch = random_batch(seed=7)
    cfg = DpoConfig(beta=2.0, schedule=schedule)
    err = finite_diff_check(lambda p: flow_dpo_loss(policy.with_params(p), ref, batch, cfg), policy.params)
    assert err < 1e-4


def test_small_beta_gradient_vanishes():
    policy, ref = small_net(seed=8), small_net(seed=9)
    batch = random_batch(seed=10)
    _, big = flow_dpo_loss(policy, ref, batch, DpoConfig(beta=1.0))
    _, tiny = flow_dpo_loss(policy, ref, batch, DpoConfig(beta=1e-8))
    assert numpy.linalg.norm(tiny) < 1e-6*numpy.linalg.norm(big)


def test_dpo_reports_non_finite():
    batch = random_batch(seed=11)
    with pytest.raises(NumericError, match="pair 0"):
        dpo_inner(Fixed(numpy.inf, 2), Fixed(0.0, 2), batch, DpoConfig())


def test_draw_shares_noise():
    batch = random_batch(seed=12)
    assert batch.x_t_w - batch.x_t_l == pytest.approx((1 - batch.t)[:, None]*(batch.x0_w - batch.x0_l))
    with pytest.raises(InputError):
        AlignBatch.draw(numpy.zeros((2, 2)), numpy.zeros((3, 2)), 0, numpy.random.default_rng(0))


def test_rwr_weights():
    assert rwr_weights([0.0, numpy.log(2)]) == pytest.approx([1, 2])
    assert rwr_weights([100.0], clip=20) == pytest.approx([numpy.exp(20)])
    with pytest.raises(NumericError):
        rwr_weights([numpy.nan])


def test_rwr_scales_flow_matching():
    rng = numpy.random.default_rng(13)
    net = small_net(seed=14)
    batch = FlowBatch.draw(rng.standard_normal((5, 2)), 1, rng)
    loss, grad = fm_loss(net, batch)
    rwr, rwr_grad = flow_rwr_loss(net, batch, numpy.full(5, numpy.log(2)))
    assert rwr == pytest.approx(2*loss)
    assert rwr_grad == pytest.approx(2*grad)
    assert sft_loss(net, batch)[0] == pytest.approx(loss)


@pytest.fixture(scope="module")
def records():
    _, records = build_pref_dataset(40, KnobDistribution(), AnnotatorModel(), seed=3)
    return records


def test_pairs_from_records(records):
    pairs = iter(pairs_from_records(records))
    for r in records:
        votes = sum(int(r.label[d] == Label.AWins) - int(r.label[d] == Label.BWins) for d in r.label)
        if votes == 0:
            continue
        p = next(pairs)
        chosen = r.sample_a if votes > 0 else r.sample_b
        assert p.cond == r.condition_class
        assert numpy.array_equal(p.chosen, chosen.flat)
        assert p.scores is None
    assert next(pairs, None) is None


def test_relabeled_file(tmp_path):
    pairs = [RelabeledPair(2, numpy.arange(4.0), -numpy.arange(4.0), (0.5, -0.25), True,
                           {"labels": {"vq": "A"}}),
             RelabeledPair(5, numpy.ones(4), numpy.zeros(4))]
    path = write_relabeled(tmp_path/"relabeled.jsonl", pairs)
    got = read_relabeled(path)
    assert got[0].cond == 2
    assert numpy.array_equal(got[0].chosen, pairs[0].chosen)
    assert got[0].scores == (0.5, -0.25)
    assert got[0].flipped
    assert got[0].provenance == {"labels": {"vq": "A"}}
    assert got[1].scores is None
    assert not got[1].flipped


def test_align_input_errors(records):
    net = velocity_net_init(32, 8, hidden=(4,))
    pairs = pairs_from_records(records)
    with pytest.raises(ConfigurationError):
        align_train("ppo", net, pairs)
    with pytest.raises(InputError):
        align_train("dpo", net, [])
    with pytest.raises(InputError, match="rwr"):
        align_train("rwr", net, pairs)


@pytest.mark.parametrize("method", ["sft", "rwr", "dpo"])
def test_align_runs_fixed_steps(records, method):
    net = velocity_net_init(32, 8, hidden=(4,), seed=1)
    pairs = [RelabeledPair(p.cond, p.chosen, p.rejected, (1.0, -1.0)) for p in pairs_from_records(records)]
    cfg = DpoConfig(beta=10, steps=3, batch_size=8, log_every=0)
    model, curve = align_train(method, net, pairs, cfg)
    assert len(curve) == 3
    assert not numpy.array_equal(model.params, net.params)
    again, _ = align_train(method, net, pairs, cfg)
    assert numpy.array_equal(model.params, again.params)
