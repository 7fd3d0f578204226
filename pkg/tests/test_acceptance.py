"""Acceptance gate A1-A8.

Each test records one pass/fail line, printed in the pytest terminal summary.
Run alone with ``python3 -m pytest tests/test_acceptance.py`` (A6 takes the
longest: a full desk-scale teacher, distillation and five prune rounds).
"""
import contextlib
import io
import json
import math
from collections import Counter

import numpy as np
import pytest
import torch
from PIL import Image

from conftest import ACCEPTANCE, n_prune, sort_oracle, toy_config
from dtpstereo.accounting import count_params
from dtpstereo.cli import main
from dtpstereo.config import build_config
from dtpstereo.data.formats import read_kitti_disparity, read_pfm, write_pfm
from dtpstereo.distill import TemperatureSchedule, kd_loss, kl_loss, temperature_at
from dtpstereo.metrics import d1, epe
from dtpstereo.model import DTPNet, soft_argmax
from dtpstereo.pruning import build_dependency_graph, group_importance, prune_step, select_channels


@contextlib.contextmanager
def criterion(tag, title):
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        ACCEPTANCE.append(f"{tag} FAIL  {title}: {type(exc).__name__} {exc}".splitlines()[0])
        raise
    extra = ", ".join(f"{k}={v}" for k, v in detail.items())
    ACCEPTANCE.append(f"{tag} PASS  {title}" + (f" ({extra})" if extra else ""))


def test_a1_param_calibration():
    with criterion("A1", "Setting3 parameter calibration") as info:
        cfg = build_config("Setting3", 192, 16)
        table = count_params(cfg)
        total = table.total.params
        info["total"] = total
        assert abs(total - 0.64e6) <= 0.15 * 0.64e6
        for module, ref in (("feature", 0.10e6), ("cost_volume", 0.03e6), ("regression", 0.51e6)):
            got = table.rows[module].params
            info[module] = got
            assert abs(got - ref) <= 0.20 * ref, module
        net = DTPNet(cfg)
        assert total == sum(p.numel() for p in net.parameters())


def _brute_soft_argmax(logits):
    e = [math.exp(v) for v in logits]
    z = sum(e)
    return sum(i * w / z for i, w in enumerate(e))


def test_a2_soft_argmax_oracle():
    with criterion("A2", "soft-argmax oracle") as info:
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            d = int(rng.integers(2, 17))
            logits = rng.normal(0, 3, size=d)
            got = soft_argmax(torch.tensor(logits).view(1, d, 1, 1)).item()
            worst = max(worst, abs(got - _brute_soft_argmax(logits.tolist())))
            assert 0 <= got <= d - 1
        info["max_err"] = f"{worst:.1e}"
        assert worst <= 1e-9
        for d in (2, 5, 16, 192):
            assert torch.all(soft_argmax(torch.zeros(1, d, 2, 3, dtype=torch.float64)) == (d - 1) / 2)
        wild = torch.from_numpy(rng.normal(0, 200, size=(2, 16, 8, 8)))
        out = soft_argmax(wild)
        assert torch.all(out >= 0) and torch.all(out <= 15)


def _central_difference(fn, x, eps=1e-6):
    num = torch.zeros_like(x)
    flat, out = x.view(-1), num.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        up = fn(x).item()
        flat[i] = old - eps
        down = fn(x).item()
        flat[i] = old
        out[i] = (up - down) / (2 * eps)
    return num


def test_a3_loss_suite():
    with criterion("A3", "distillation losses") as info:
        rng = np.random.default_rng(3)
        p = torch.from_numpy(rng.normal(0, 2, size=(2, 6, 3, 3)))
        for t in (0.5, 1.0):
            assert kd_loss(p, p.clone(), t).item() == 0.0
            assert abs(kl_loss(p, p.clone(), t).item()) <= 1e-12
        worst = 0.0
        for _ in range(10):
            d = int(rng.integers(2, 9))
            p = torch.from_numpy(rng.normal(0, 2, size=(2, d, 2, 2)))
            q = torch.from_numpy(rng.normal(0, 2, size=(2, d, 2, 2)))
            t = float(rng.uniform(0.5, 1.0))
            p.requires_grad_(True)
            kd_loss(p, q, t).backward()
            numeric = _central_difference(lambda x: kd_loss(x, q, t), p.detach().clone())
            rel = ((p.grad - numeric).norm() / numeric.norm().clamp_min(1e-12)).item()
            worst = max(worst, rel)
        info["max_rel_grad_err"] = f"{worst:.1e}"
        assert worst < 1e-3
        sched = TemperatureSchedule(0.5, 1.0, 15)
        assert temperature_at(sched, 0) == 0.5 and temperature_at(sched, 14) == 1.0
        # two bins: softmax(0, 0) = (1/2, 1/2) against softmax(0, ln 3) = (1/4, 3/4)
        two = kd_loss(torch.tensor([0.0, 0.0], dtype=torch.float64).view(1, 2, 1, 1),
                      torch.tensor([0.0, math.log(3)], dtype=torch.float64).view(1, 2, 1, 1), 1.0)
        assert abs(two.item() - 0.5) <= 1e-9


def _toy_scores(state, a, b):
    W1 = state["layers.f1.weight"].double().numpy()
    W2 = state["layers.f2.weight"].double().numpy()
    Wc = state["layers.cv.weight"].double().numpy()
    s1 = [np.sqrt((W1[k] ** 2).sum()) + np.sqrt((W2[:, k] ** 2).sum()) for k in range(a)]
    s2 = [np.sqrt((W2[k] ** 2).sum()) + np.sqrt((Wc[:, k] ** 2).sum()) + np.sqrt((Wc[:, b + k] ** 2).sum())
          for k in range(b)]
    return {"f1": s1, "f2": s2}


def test_a4_pruning_oracle():
    with criterion("A4", "pruning against brute-force ranking") as info:
        rng = np.random.default_rng(2)
        nets = 0
        for r in (0.1, 0.25, 0.5):
            for trial in range(20):
                a, b = (int(v) for v in rng.integers(1, 9, size=2))
                torch.manual_seed(trial)
                net = DTPNet(toy_config((a, b), d_max=8)).eval()
                scores = _toy_scores(net.state_dict(), a, b)
                new, rec = prune_step(net, r)
                for name, n in (("f1", a), ("f2", b)):
                    assert rec["removed"].get(name, []) == sort_oracle(scores[name], r)
                    assert rec["sizes_after"][name] == n - n_prune(r, n)
                x = torch.rand(1, 3, 12, 16)
                logits, disp = new(x, x)
                assert logits.shape == (1, 8, 12, 16) and disp.shape == (1, 12, 16)
                nets += 1
        info["toy_nets"] = nets

        torch.manual_seed(5)
        net = DTPNet(toy_config((8, 8), d_max=8))
        graph = build_dependency_graph(net.config)
        state = net.state_dict()
        for c in (1e-3, 0.5, 7.0, 1e3):
            for r in (0.1, 0.25, 0.5):
                for g in graph.prunable:
                    base = select_channels(group_importance(g, state), r)
                    scaled = {k: v.clone() for k, v in state.items()}
                    for m in g.kernel_members():
                        scaled[m.tensor].movedim(m.axis, 0)[m.positions] *= c
                    assert select_channels(group_importance(g, scaled), r) == base

        cfg = build_config("Setting3", 192, 16)
        state = DTPNet(cfg).state_dict()
        graph = build_dependency_graph(cfg)
        seen = Counter((m.tensor, m.axis, p) for g in graph.groups for m in g.members for p in m.positions)
        expected = set()
        for name, t in state.items():
            if name.endswith("num_batches_tracked"):
                continue
            for axis in ([0, 1] if t.dim() == 4 else [0]):
                expected |= {(name, axis, i) for i in range(t.shape[axis])}
        assert set(seen) == expected and max(seen.values()) == 1
        info["groups"] = f"{len(graph.prunable)} prunable + {len(graph.unprunable)} fixed"


def test_a5_compression_arithmetic():
    with criterion("A5", "five rounds at r=0.1 on Setting3") as info:
        cfg = build_config("Setting3", 192, 16)
        torch.manual_seed(0)
        net = DTPNet(cfg)
        start = build_dependency_graph(cfg).sizes()
        params = [net.num_parameters()]
        for _ in range(5):
            net, _ = prune_step(net, 0.1)
            params.append(net.num_parameters())
        assert all(a > b for a, b in zip(params, params[1:]))
        final = build_dependency_graph(net.config).sizes()
        slack = sum(0.9 ** j for j in range(5))
        for name, n in start.items():
            assert 0.9 ** 5 * n <= final[name] < 0.9 ** 5 * n + slack, name
        reduction = 1 - params[-1] / params[0]
        info["reduction"] = f"{100 * reduction:.1f}%"
        assert 0.30 <= reduction <= 0.65


def test_a6_desk_scale_dtp(tmp_path):
    with criterion("A6", "desk-scale teacher, distillation and pruning") as info:
        assert main(["train-teacher", "--preset", "desk", "--out", str(tmp_path)]) == 0
        teacher = json.loads((tmp_path / "teacher_metrics.jsonl").read_text().splitlines()[-1])
        epe_t = teacher["val_epe"]
        info["teacher_epe"] = f"{epe_t:.3f}"
        assert epe_t <= 2.0
        assert main(["dtp", "--preset", "desk", "--checkpoint", str(tmp_path / "teacher.pt"),
                     "--out", str(tmp_path)]) == 0
        final = json.loads((tmp_path / "final_metrics.json").read_text())
        info["student_epe"] = f"{final['epe']:.3f}"
        info["bound"] = f"{max(1.5 * epe_t, 2.0):.3f}"
        assert final["phase"] == "round5"
        assert final["epe"] <= max(1.5 * epe_t, 2.0)


def test_a7_formats_and_metrics():
    with criterion("A7", "PFM, KITTI PNG and masked metrics"):
        rng = np.random.default_rng(0)
        for shape in ((1, 1), (4, 7), (13, 5)):
            for scale in (-1.0, 1.0):
                data = write_pfm(rng.normal(size=shape).astype(np.float32), scale)
                assert write_pfm(read_pfm(data), scale) == data
        buf = io.BytesIO()
        Image.fromarray(np.array([[512, 0]], dtype=np.uint16)).save(buf, format="PNG")
        disp, valid = read_kitti_disparity(buf.getvalue())
        assert disp[0, 0] == 2.0 and valid[0, 0] and not valid[0, 1]
        for _ in range(100):
            pred, gt = rng.uniform(0, 50, (2, 6, 5))
            mask = rng.random((6, 5)) < 0.5
            junk = rng.uniform(-1e6, 1e6, (6, 5))
            bad_pred, bad_gt = np.where(mask, pred, junk), np.where(mask, gt, -junk)
            assert epe(pred, gt, mask) == epe(bad_pred, bad_gt, mask)
            assert d1(pred, gt, mask) == d1(bad_pred, bad_gt, mask)


def test_a8_dtp_rerun_is_identical(tmp_path):
    with criterion("A8", "dtp rerun reproduces the final metrics record"):
        teacher = ["train-teacher", "--preset", "desk-tiny", "--out", str(tmp_path / "t")]
        assert main(teacher) == 0
        finals = []
        for name in ("a", "b"):
            assert main(["dtp", "--preset", "desk-tiny", "--checkpoint", str(tmp_path / "t" / "teacher.pt"),
                         "--out", str(tmp_path / name)]) == 0
            finals.append((tmp_path / name / "final_metrics.json").read_text())
        assert finals[0] == finals[1]
        metrics = [(tmp_path / n / "dtp_metrics.jsonl").read_text() for n in ("a", "b")]
        assert metrics[0] == metrics[1]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
