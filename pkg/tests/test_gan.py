import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from fanbench.gan import (KAPPA, Discriminator, FanConfig, FanTrainingError, Generator,
                          discriminator_loss, discriminator_step, full_objective,
                          generate_perturbation, generator_adversarial_loss, generator_step,
                          load_generator, lsgan_generator_loss,
                          save_generator, train_fan)
from fanbench.losses import TARGETED, UNTARGETED, LossWeights
from fanbench.tracker import TrackerModel, make_labels


class ConstantD(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0], 1, 5, 5), self.value, dtype=x.dtype)


@pytest.fixture(scope="module")
def gen():
    return Generator(base_channels=4, n_blocks=2, seed=0).eval()


@pytest.mark.parametrize("side", [127, 255, 64, 37])
def test_generator_preserves_shape(gen, side):
    q = torch.rand(2, 3, side, side)
    with torch.no_grad():
        assert gen(q).shape == q.shape


def test_generator_output_bounded_by_kappa(gen):
    torch.manual_seed(1)
    with torch.no_grad():
        for _ in range(10):
            q = torch.rand(10, 3, 48, 48)
            assert float(gen(q).abs().max()) <= KAPPA + 1e-7


def test_generator_deterministic_and_numpy_entry(gen):
    q = np.random.default_rng(0).uniform(0, 1, (40, 40, 3)).astype(np.float32)
    with torch.no_grad():
        a = generate_perturbation(gen, q)
        b = generate_perturbation(gen, q)
    assert torch.equal(a, b) and a.shape == (1, 3, 40, 40)


@pytest.mark.parametrize("shape", [(3, 64, 64), (1, 1, 64, 64), (1, 3, 8, 8)])
def test_generator_rejects_bad_input(gen, shape):
    with pytest.raises(ValueError):
        gen(torch.rand(*shape))


def test_discriminator_grid_smaller_than_input():
    d = Discriminator(4)
    for side in (127, 255):
        out = d(torch.rand(1, 3, side, side))
        assert out.shape[1] == 1 and out.shape[-1] < side


@pytest.mark.parametrize("value,d_loss,g_loss", [(0.0, 1.0, 1.0), (1.0, 1.0, 0.0), (0.5, 0.5, 0.25)])
def test_lsgan_losses_with_constant_discriminator(gen, value, d_loss, g_loss):
    batch = torch.rand(2, 3, 32, 32)
    assert float(discriminator_loss(ConstantD(value), gen, batch)) == pytest.approx(d_loss)
    assert float(generator_adversarial_loss(ConstantD(value), gen, batch)) == pytest.approx(g_loss)


def test_generator_loss_recomputed_from_stored_outputs(gen):
    torch.manual_seed(2)
    d = Discriminator(4).double()
    g = gen.double()
    batch = torch.rand(3, 3, 40, 40, dtype=torch.float64)
    with torch.no_grad():
        value = float(generator_adversarial_loss(d, g, batch))
        stored = d(torch.clamp(batch + g(batch), 0, 1)).numpy()
    assert value == pytest.approx(float(np.mean((stored - 1.0) ** 2)), abs=1e-9)
    gen.float()


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=50))
def test_least_squares_terms_bounded_below(values):
    d = torch.tensor(values, dtype=torch.float64)
    total = float(lsgan_generator_loss(d) + (d ** 2).mean())
    assert total >= 0.5 - 1e-12


def test_full_objective_arithmetic():
    ones = {k: torch.tensor(1.0) for k in ("gan", "sim", "embed", "drift")}
    assert float(full_objective(UNTARGETED, ones)) == pytest.approx(11.0016)
    assert float(full_objective(TARGETED, ones)) == pytest.approx(1.1024)
    big = dict(ones, drift=torch.tensor(1e6))
    assert float(full_objective(TARGETED, big)) == pytest.approx(1.1024)
    big = dict(ones, embed=torch.tensor(1e6))
    assert float(full_objective(UNTARGETED, big)) == pytest.approx(11.0016)
    with pytest.raises(ValueError):
        full_objective(UNTARGETED, {"gan": 1.0})


class PairStub:
    def __init__(self, n, seed=0, bad=False):
        rng = np.random.default_rng(seed)
        self.items = [(rng.uniform(0, 1, (127, 127, 3)).astype(np.float32),
                       rng.uniform(0, 1, (255, 255, 3)).astype(np.float32), make_labels())
                      for _ in range(n)]
        if bad:
            self.items[0][1][:] = np.nan

    def __len__(self):
        return len(self.items)

    def __getitem__(self, k):
        return self.items[k]


class TripleStub:
    def __init__(self, n):
        from fanbench.data import EmbeddingTriple
        rng = np.random.default_rng(1)
        self.items = [EmbeddingTriple(*(rng.uniform(0, 1, (127, 127, 3)).astype(np.float32)
                                        for _ in range(4))) for _ in range(n)]

    def __len__(self):
        return len(self.items)

    def __getitem__(self, k):
        return self.items[k]


TINY = dict(base_channels=4, n_blocks=1, disc_channels=4, batch_size=2)


@pytest.fixture(scope="module")
def tracker():
    return TrackerModel("B", seed=0).eval()


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_alternating_steps_touch_only_their_network(tracker):
    cfg = FanConfig(**TINY)
    g, d = Generator(4, 1), Discriminator(4)
    opt_g = torch.optim.Adam(g.parameters(), lr=1e-2)
    opt_d = torch.optim.Adam(d.parameters(), lr=1e-2)
    z = torch.rand(2, 3, 127, 127)
    q = torch.rand(2, 3, 255, 255)
    labels = torch.from_numpy(make_labels())
    g0, d0 = _params(g), _params(d)
    discriminator_step(d, opt_d, g, q)
    assert _same(g0, _params(g)) and not _same(d0, _params(d))
    d1 = _params(d)
    generator_step(g, opt_g, d, tracker, UNTARGETED, cfg, q, z=z, labels=labels)
    assert _same(d1, _params(d)) and not _same(g0, _params(g))


def test_train_fan_keeps_tracker_frozen_and_selects_best(tracker):
    before = {k: v.clone() for k, v in tracker.state_dict().items()}
    scores = iter([0.1, 0.5, 0.3])
    snapshots = []

    def validate(g):
        snapshots.append({k: v.clone() for k, v in g.state_dict().items()})
        return next(scores)

    g = train_fan(tracker, PairStub(4), UNTARGETED, FanConfig(epochs=2, **TINY), validate)
    for k, v in tracker.state_dict().items():
        assert torch.equal(v, before[k])
    assert g.history["val"] == [0.1, 0.5, 0.3] and g.best_score == 0.5
    for k, v in g.state_dict().items():
        assert torch.equal(v, snapshots[1][k])
    assert len(g.history["steps"]) == 4
    assert {"gan", "sim", "embed", "drift", "total", "d"} <= set(g.history["steps"][0])


def test_train_fan_targeted_mode_uses_embedding(tracker):
    g = train_fan(tracker, TripleStub(2), TARGETED, FanConfig(epochs=1, **TINY))
    rec = g.history["steps"][0]
    assert rec["drift"] == 0.0 and rec["embed"] > 0.0


def test_train_fan_divergence_reports_diagnostics(tracker):
    with pytest.raises(FanTrainingError) as info:
        train_fan(tracker, PairStub(2, bad=True), UNTARGETED, FanConfig(epochs=1, **TINY))
    assert info.value.diagnostics["step"] == 0


def test_checkpoint_round_trip(tmp_path):
    g = Generator(4, 2, kappa=0.05, seed=3)
    save_generator(g, tmp_path / "g.pt", TARGETED, {"preset": "targeted"})
    meta = json.loads((tmp_path / "g.json").read_text())
    assert meta["kappa"] == 0.05 and meta["n_blocks"] == 2 and meta["seed"] == 3
    assert meta["loss_weights"]["alpha2"] == 0.1 and meta["mode"] == "targeted"
    back = load_generator(tmp_path / "g.pt")
    q = torch.rand(1, 3, 40, 40)
    with torch.no_grad():
        assert torch.equal(back(q), g.eval()(q))


def test_similarity_weight_shrinks_perturbations(tracker):
    """Larger alpha1 gives smaller perturbations (3-point ablation)."""
    data = PairStub(4, seed=5)
    probe = torch.from_numpy(np.stack([data[k][1] for k in range(4)]).transpose(0, 3, 1, 2))
    sizes = []
    for a1 in (0.0, 0.05, 5.0):
        w = LossWeights(alpha1=a1, alpha2=0.0, alpha3=1.0)
        g = train_fan(tracker, data, w, FanConfig(epochs=4, lr=5e-3, **TINY))
        with torch.no_grad():
            sizes.append(float(g(probe).abs().mean()))
    assert sizes[0] > sizes[1] > sizes[2]
