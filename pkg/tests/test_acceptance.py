"""End-to-end acceptance checks, one per criterion.

Each test prints a single ``criterion N ... PASS|FAIL`` line; the lines are
repeated in the terminal summary. Criteria 5 to 7 share one pretrained
estimator (about half an hour on one core); criterion 6 trains two networks.
"""
import io
import time

import numpy as np
import pytest
import torch

import metric_reference as ref
from conftest import attention_oracle, finite_difference_error, random_homography
from pcnet.checkpoint import load_checkpoint, tensor_digest
from pcnet.cli import main
from pcnet.core import RunConfig, apply_homography, image_corners
from pcnet.data import MisalignParams, ToySceneSpec, generate_toy_dataset
from pcnet.evaluation import e_measure, evaluate_dataset, f_measure, s_measure
from pcnet.geometry import solve_dlt
from pcnet.head import Decoder, bce_dice_loss
from pcnet.iimc import AttentionBlock, attention_correlate, inter_modal_correlate, intra_modal_correlate
from pcnet.she import (
    HomographyEstimator, SAdapter, corner_grid, dlt, estimate_homography, evaluate_estimator,
    prepare_pairs, pretrain_estimator, s_adapter_forward, semantic_gate, warp_image,
)
from pcnet.training import Trainer, build_model, model_from_checkpoint, prepare_batch, predict_batch
from test_geometry import brute_warp

D = torch.float64
RESULTS = []


def report(n, name, ok, **details):
    line = f"criterion {n} {name}: {'PASS' if ok else 'FAIL'} " + " ".join(
        f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in details.items())
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. geometry

def test_criterion_1_geometry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_dlt = 0.0
    for _ in range(1000):
        src = image_corners(64, 64) + rng.uniform(-6, 6, size=(4, 2))
        dst = src + rng.uniform(-12, 12, size=(4, 2))
        h = solve_dlt(src, dst)
        worst_dlt = max(worst_dlt, np.abs(apply_homography(h, src) - dst).max())
    worst_warp = 0.0
    for _ in range(100):
        img = rng.uniform(size=(1, 16, 16))
        m = random_homography(rng, 16, 0.3).m
        out, _ = warp_image(torch.as_tensor(img), torch.tensor(m))
        worst_warp = max(worst_warp, np.abs(out.numpy() - brute_warp(img, m)[0]).max())
    secs = time.perf_counter() - t0
    report(1, "geometry", worst_dlt < 1e-6 and worst_warp < 1e-6 and secs < 30,
           dlt_err=worst_dlt, warp_err=worst_warp, seconds=secs)


# ---------------------------------------------------------------------------
# 2. attention and adapter oracles

def _adapter_oracle(f_l, f_s, w_dn, w_dn_s, w_up):
    out = np.zeros((w_up.shape[0],) + f_l.shape[1:])
    for i in range(f_l.shape[1]):
        for j in range(f_l.shape[2]):
            x = w_dn @ f_l[:, i, j]
            y = w_dn_s @ f_s[:, i, j]
            out[:, i, j] = w_up @ np.maximum(x / (1 + np.exp(-y.mean())), 0)
    return out


def _gate_oracle(x, y):
    out = np.empty_like(x)
    for i in range(x.shape[1]):
        for j in range(x.shape[2]):
            out[:, i, j] = x[:, i, j] / (1 + np.exp(-y[:, i, j].mean()))
    return out


def _tok(x):
    return x[0].reshape(x.shape[1], -1).T.numpy()


def test_criterion_2_attention_and_adapter_oracles():
    g = torch.Generator().manual_seed(2)
    worst, worst_rows = 0.0, 0.0
    for _ in range(20):
        # adapter and gate, up to 5x5 = 25 tokens
        hw = tuple(torch.randint(1, 6, (2,), generator=g).tolist())
        f_l, f_s = torch.randn(1, 4, *hw, generator=g, dtype=D), torch.randn(1, 3, *hw, generator=g, dtype=D)
        w_dn, w_dn_s, w_up = (torch.randn(*s, generator=g, dtype=D) for s in ((2, 4), (2, 3), (4, 2)))
        got = s_adapter_forward(f_l, f_s, w_dn, w_dn_s, w_up)[0].numpy()
        want = _adapter_oracle(*(a.numpy() for a in (f_l[0], f_s[0], w_dn, w_dn_s, w_up)))
        worst = max(worst, np.abs(got - want).max())
        x = torch.randn(1, 3, *hw, generator=g, dtype=D)
        worst = max(worst, np.abs(semantic_gate(x, f_s)[0].numpy() - _gate_oracle(x[0].numpy(), f_s[0].numpy())).max())

        # scaled dot-product attention, up to 32 query and key tokens
        nq, nk = torch.randint(1, 33, (2,), generator=g).tolist()
        q, kv = torch.randn(1, nq, 5, generator=g, dtype=D), torch.randn(1, nk, 3, generator=g, dtype=D)
        wq, wk, wv = (torch.randn(4, c, generator=g, dtype=D) for c in (5, 3, 3))
        out, w = attention_correlate(q, kv, wq, wk, wv, return_weights=True)
        worst = max(worst, np.abs(out[0].numpy() - attention_oracle(
            q[0].numpy(), kv[0].numpy(), wq.numpy(), wk.numpy(), wv.numpy())).max())
        worst_rows = max(worst_rows, (w.sum(-1) - 1).abs().max().item())

        # inter-modal (gated cross attention) and intra-modal (self attention) on 4x4 maps
        torch.manual_seed(int(torch.randint(0, 10**6, (1,), generator=g)))
        block = AttentionBlock(3, 3, 3).double()
        ws = [l.weight.detach().numpy() for l in (block.q, block.k, block.v)]
        f_rgb, f_t, f_i = (torch.randn(1, 3, 4, 4, generator=g, dtype=D) for _ in range(3))
        m, gs = torch.rand(1, 1, 4, 4, generator=g, dtype=D), torch.rand(1, 1, 4, 4, generator=g, dtype=D)
        inter = inter_modal_correlate(f_rgb, f_t, m, gs, block).detach()
        worst = max(worst, np.abs(_tok(inter) - attention_oracle(_tok(f_rgb * m * gs), _tok(f_t), *ws)).max())
        intra = intra_modal_correlate(f_rgb, f_i, block).detach()
        worst = max(worst, np.abs(_tok(intra) - attention_oracle(_tok(f_rgb + f_i), _tok(f_rgb + f_i), *ws)).max())
    report(2, "attention_adapter_oracles", worst < 1e-6 and worst_rows < 1e-6,
           max_err=worst, softmax_row_err=worst_rows)


# ---------------------------------------------------------------------------
# 3. gradients

def test_criterion_3_gradients():
    t0 = time.perf_counter()
    torch.manual_seed(3)
    errs = {}

    adapter = SAdapter(3, 2, 2).double()
    with torch.no_grad():
        adapter.w_up.normal_()
    f_l = torch.randn(1, 3, 3, 3, dtype=D, requires_grad=True)
    f_s = torch.randn(1, 2, 3, 3, dtype=D, requires_grad=True)
    w = torch.randn(1, 3, 3, 3, dtype=D)
    errs["adapter"] = finite_difference_error(lambda: (adapter(f_l, f_s) * w).sum(),
                                              [f_l, f_s] + list(adapter.parameters()))

    block = AttentionBlock(2, 2, 2).double()
    q = torch.randn(1, 5, 2, dtype=D, requires_grad=True)
    kv = torch.randn(1, 4, 2, dtype=D, requires_grad=True)
    w = torch.randn(1, 5, 2, dtype=D)
    errs["attention"] = finite_difference_error(lambda: (block(q, kv) * w).sum(),
                                                [q, kv] + list(block.parameters()))

    logits = torch.randn(1, 1, 6, 6, dtype=D, requires_grad=True)
    gt = (torch.rand(1, 1, 6, 6) > 0.5).double()
    errs["bce_dice"] = finite_difference_error(lambda: bce_dice_loss(logits, gt), [logits])

    dec = Decoder((2, 2, 2, 2), 2).double()
    feats = [torch.randn(1, 2, 32 // s, 32 // s, dtype=D, requires_grad=True) for s in (4, 8, 16, 32)]
    w = torch.randn(1, 1, 32, 32, dtype=D)
    errs["decoder"] = finite_difference_error(lambda: (dec(feats).logits * w).sum(),
                                              feats + list(dec.parameters()))

    rng = np.random.default_rng(3)
    img = torch.as_tensor(rng.uniform(size=(1, 1, 16, 16)))
    disp = torch.as_tensor(rng.uniform(-1.5, 1.5, size=(1, 4, 2))).requires_grad_()
    pix = torch.as_tensor(rng.integers(3, 13, size=(12, 2)))
    pw = torch.as_tensor(rng.normal(size=12))

    def warp_loss():
        c = corner_grid(16, 16)[None]
        out, _ = warp_image(img, dlt(c, c + disp))
        return (out[0, 0][pix[:, 1], pix[:, 0]] * pw).sum()

    errs["warp"] = finite_difference_error(warp_loss, [disp], h=1e-4)
    secs = time.perf_counter() - t0
    report(3, "gradients", max(errs.values()) < 1e-4 and secs < 300, seconds=secs,
           **{f"{k}_rel_err": v for k, v in errs.items()})


# ---------------------------------------------------------------------------
# 4. metrics

def test_criterion_4_metrics():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        h, w = rng.integers(4, 33, size=2)
        gt = (rng.uniform(size=(h, w)) > rng.uniform(0.2, 0.8)).astype(float)
        pred = rng.uniform(size=(h, w)) if rng.uniform() < 0.5 else np.clip(
            gt * 0.6 + rng.uniform(0, 0.5, size=(h, w)), 0, 1)
        p, g = pred.tolist(), gt.astype(int).tolist()
        for fn, oracle in ((e_measure, ref.e_measure), (s_measure, ref.s_measure), (f_measure, ref.f_measure)):
            worst = max(worst, abs(fn(pred, gt) - oracle(p, g)))
    perfect = 0.0
    for _ in range(20):
        gt = (rng.uniform(size=(12, 9)) > 0.5).astype(float)
        perfect = max(perfect, *(abs(fn(gt, gt) - 1) for fn in (e_measure, s_measure, f_measure)))
    hand = f_measure(np.array([[1, 1], [0, 0.0]]), np.array([[1, 0], [0, 0.0]]))
    report(4, "metrics", worst < 1e-9 and perfect < 1e-9 and round(hand, 6) == 0.565217,
           max_err=worst, perfect_err=perfect, hand_f=round(hand, 6))


# ---------------------------------------------------------------------------
# 5. estimator pretraining (shared by 6 and 7)

PRETRAIN_SCENES, HELD_OUT_SCENES = 2000, 200


@pytest.fixture(scope="session")
def pretrained():
    torch.set_num_threads(1)
    cfg = RunConfig(rng_seed=0)
    spec = ToySceneSpec(128, 3, MisalignParams())
    t0 = time.perf_counter()
    train = generate_toy_dataset(spec, PRETRAIN_SCENES, 11)
    held_out = generate_toy_dataset(spec, HELD_OUT_SCENES, 12)
    est, _ = pretrain_estimator(train, cfg)
    errs = evaluate_estimator(est, prepare_pairs(held_out, 128))
    return cfg, est, errs, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_5_pretraining(pretrained):
    _, _, errs, secs = pretrained
    identity, final = errs[0].mean().item(), errs[-1].mean().item()
    monotone = (errs[1:] <= errs[:-1]).all(dim=0).double().mean().item()
    report(5, "estimator_pretraining", final < 0.25 * identity and monotone >= 0.9 and secs < 3600,
           identity_mace=identity, final_mace=final, ratio=final / identity,
           monotone_frac=monotone, seconds=secs)


@pytest.mark.slow
def test_pretrained_translation_error_decreases_until_converged(pretrained):
    _, est, _, _ = pretrained
    shift = MisalignParams((0, 0), (8 / 128, 8 / 128), (1, 1), (0, 0), (0, 0))
    sample = generate_toy_dataset(ToySceneSpec(128, 3, shift), 1, 40)[0]
    with torch.no_grad():
        rgb, th, target = prepare_pairs([sample], 128)
        state = est(rgb, th)
    assert target.eq(torch.tensor([8.0, 0.0], dtype=D)).all()
    err = evaluate_estimator(est, (rgb, th, target))[:, 0]
    steps = [state.history[k + 1] - state.history[k] for k in range(len(state.history) - 1)]
    active = 1 + next((k for k, d in enumerate(steps) if not d.any()), len(steps))
    assert err[0] == 8.0
    assert bool((err[1:active + 1] < err[:active]).all())
    assert bool((err[active + 1:] == err[active]).all())
    assert err[-1] < 4.0


# ---------------------------------------------------------------------------
# 6. end-to-end toy run

TOY = dict(input_size=128, backbone_channels=(16, 32, 64, 128), semantic_channels=32,
           attention_dim=32, decoder_channels=32, max_tokens_side=16, lr=1e-3, epochs=30,
           batch_size=4, rng_seed=0)
# dim or camouflaged objects in some scenes, so the thermal view carries information the RGB lacks
TOY_CONTRAST = (0.1, 1.0)


def _train_and_score(cfg, est, train, test):
    trainer = Trainer(build_model(cfg, est), cfg)
    trainer.fit(train, None)
    pairs = []
    for i in range(0, len(test), 8):
        batch = test.take(range(i, min(i + 8, len(test))))
        prob, _ = predict_batch(trainer.model, batch)
        pairs += [(sid, prob[j, 0].double().numpy(), batch.gt[j, 0].numpy(), ())
                  for j, sid in enumerate(batch.ids)]
    return evaluate_dataset(pairs).aggregate


@pytest.mark.slow
def test_criterion_6_toy_run(pretrained):
    base, est, _, _ = pretrained
    t0 = time.perf_counter()
    cfg = base.replace(**TOY)
    spec = ToySceneSpec(128, 3, MisalignParams(), rgb_contrast=TOY_CONTRAST)
    train = prepare_batch(generate_toy_dataset(spec, 500, 21), 128)
    test = prepare_batch(generate_toy_dataset(spec, 100, 22), 128)
    _, s_full, f_full = _train_and_score(cfg, est, train, test)
    _, s_she, f_she = _train_and_score(cfg.with_ablation("she"), est, train, test)
    secs = time.perf_counter() - t0
    report(6, "toy_run", s_full >= 0.80 and f_full >= 0.70 and s_she < s_full and secs < 7200,
           Sm=s_full, Fm=f_full, Sm_without_she=s_she, Fm_without_she=f_she, seconds=secs)


# ---------------------------------------------------------------------------
# 7. freeze and identity invariants

@pytest.mark.slow
def test_criterion_7_freeze_and_identity(pretrained):
    base, est, _, _ = pretrained
    cfg = base.replace(**{**TOY, "input_size": 64, "lr": 1e-3})
    spec = ToySceneSpec(64, 3, MisalignParams())
    data = prepare_batch(generate_toy_dataset(spec, 16, 31), 64)
    model = build_model(cfg, est).eval()
    with torch.no_grad():
        f_rgb = model.rgb_encoder(data.rgb)
        f_t = model.thermal_encoder(data.thermal.expand(-1, 3, -1, -1))
        f_s = model.semantic_feature(f_rgb[-1], f_t[-1])
        adapted = estimate_homography(data.rgb, data.thermal, model.estimator, f_s, model.adapters)
        plain = estimate_homography(data.rgb, data.thermal, model.estimator)
    identical = torch.equal(adapted, plain)

    frozen = model.frozen_names()
    before = tensor_digest(dict(model.named_parameters()), frozen)
    trainer = Trainer(model, cfg)
    order = np.random.default_rng(7)
    for _ in range(100):
        trainer.step(data.take(order.choice(len(data), cfg.batch_size, replace=False)))
    after = tensor_digest(dict(model.named_parameters()), frozen)
    adapters_moved = any(p.abs().sum() > 0 for p in model.adapters.parameters())
    report(7, "freeze_identity", identical and before == after and len(frozen) > 0,
           zero_adapter_bitwise=identical, frozen_tensors=len(frozen),
           frozen_unchanged=before == after, adapters_trained=adapters_moved)


# ---------------------------------------------------------------------------
# 8. reproducibility

SMALL = """\
input_size = 64
backbone_channels = 8, 16, 16, 32
semantic_channels = 16
adapter_dim = 4
attention_dim = 16
decoder_channels = 16
max_tokens_side = 8
estimator_size = 64
estimator_channels = 8, 16, 16
estimator_iterations = 3
batch_size = 4
epochs = 2
checkpoint_every = 1
pretrain_epochs = 2
synth_size = 64
synth_count = 24
"""


def _cli(*argv):
    return main([str(a) for a in argv], stream=io.StringIO())


def _tree_bytes(root, skip_logs=False):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not (skip_logs and p.suffix == ".log")}


def test_criterion_8_reproducibility(tmp_path):
    torch.set_num_threads(1)
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL)
    runs = []
    for name in ("a", "b"):
        root = tmp_path / name
        codes = [
            _cli("synth", "--config", cfg, "--seed", 5, "--out", root / "data"),
            _cli("pretrain", "--config", cfg, "--out", root / "pre", "--data", root / "data"),
            _cli("train", "--config", cfg, "--out", root / "run", "--data", root / "data",
                 "--estimator", root / "pre/estimator.ckpt"),
            _cli("eval", "--checkpoint", root / "run/model.ckpt", "--data", root / "data",
                 "--report", root / "report.txt", "--out", root / "pred"),
        ]
        assert codes == [0, 0, 0, 0], codes
        runs.append({k: _tree_bytes(root / k) for k in ("data", "pre", "run", "pred")}
                    | {"report": (root / "report.txt").read_bytes()})
    same = {k: runs[0][k] == runs[1][k] for k in runs[0]}

    ckpt = load_checkpoint(tmp_path / "a/run/model.ckpt")
    model = model_from_checkpoint(ckpt)
    trainer = Trainer.resume(ckpt)
    trainer.save(tmp_path / "copy.ckpt")
    again = model_from_checkpoint(load_checkpoint(tmp_path / "copy.ckpt"))
    spec = ToySceneSpec(64, 3, MisalignParams())
    batch = prepare_batch(generate_toy_dataset(spec, 4, 9), 64)
    with torch.no_grad():
        a = model(batch.rgb, batch.thermal)
        b = again(batch.rgb, batch.thermal)
    round_trip = torch.equal(a.prediction.logits, b.prediction.logits) and torch.equal(a.homography, b.homography)
    report(8, "reproducibility", all(same.values()) and round_trip,
           **{f"{k}_bitwise": v for k, v in same.items()}, checkpoint_round_trip=round_trip)
