from dataclasses import replace

import numpy as np
import pytest

from nvsgraph import diffengine as de
from nvsgraph.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from nvsgraph.config import LayerSpec, ModelConfig, dump_model_config, load_model_config, preset_names
from nvsgraph.graph_build import batch_graphs
from nvsgraph.models import build_model, final_extent, trace_extents
from nvsgraph.train import evaluate

from conftest import random_graph


def test_presets_load_and_roundtrip(tmp_path):
    names = preset_names()
    for required in ("object_small", "object_large", "action_plain3d", "action_res3d"):
        assert required in names
    for name in names:
        cfg = load_model_config(name)
        path = tmp_path / f"{name}.yaml"
        path.write_text(dump_model_config(cfg))
        assert load_model_config(path) == cfg


def test_preset_hyperparameters():
    obj = load_model_config("object_large")
    assert obj.train.epochs == 150 and obj.train.batch_size == 64 and obj.train.milestones == (60, 110)
    assert obj.kernel_size == (5, 5) and obj.degree == 1
    assert obj.graph.radius == 3.0 and obj.graph.d_max == 32 and obj.graph.beta == 0.5e-5
    assert obj.sampling.k_max == 8
    assert [s.out for s in obj.spatial if s.kind != "pool"] == [64, 128, 256, 512]
    assert obj.fc == (1024,) and final_extent(obj) == (4, 4)
    act = load_model_config("action_res3d")
    assert act.train.batch_size == 32 and act.s_count == 8 and act.temporal == "res3d"
    assert act.augment.scale == (0.8, 1.0) and act.augment.flip_y == 0.0
    assert trace_extents(load_model_config("object_small")) == [(17, 17), (5, 5), (1, 1)]


def test_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model_config("no_such_preset")
    base = load_model_config("object_small").to_dict()
    for mutate in (
        lambda d: d.update(task="segmentation"),
        lambda d: d.update(num_classes=1),
        lambda d: d.update(s_count=4),
        lambda d: d.update(surprise=1),
        lambda d: d["spatial"].insert(0, {"type": "pool", "size": [2, 2]}),
        lambda d: d["spatial"].append({"type": "pool"}),
        lambda d: d["train"].update(milestones=[5, 5]),
    ):
        d = {**base, "spatial": [dict(s) for s in base["spatial"]], "train": dict(base["train"])}
        mutate(d)
        with pytest.raises((ValueError, TypeError)):
            ModelConfig.from_dict(d)
    with pytest.raises(ValueError):
        LayerSpec("pool", size=(2, 2), cell=(2, 2))
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ValueError):
        load_model_config(tmp_path / "list.yaml")


def test_same_seed_same_model():
    cfg = load_model_config("desk_object")
    a, b = build_model(cfg, 3).state_dict(), build_model(cfg, 3).state_dict()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    c = build_model(cfg, 4).state_dict()
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def sensor_graphs(cfg, count, rng, n=60):
    h, w = cfg.sensor
    out = []
    for _ in range(count):
        g = random_graph(rng, n=n, extent=(h, w), p_edge=0.05)
        g.pos[:, 0] = rng.uniform(0, w - 1, n)
        g.pos[:, 1] = rng.uniform(0, h - 1, n)
        out.append(g.with_pos(g.pos))
    return out


@pytest.mark.parametrize("preset", ["action_plain3d", "action_res3d"])
def test_action_models_run_on_eight_graphs(preset):
    cfg = replace(load_model_config(preset), width=1 / 16, num_classes=5)
    model = build_model(cfg, 0)
    model.eval()
    rng = np.random.default_rng(0)
    batch = batch_graphs(sensor_graphs(cfg, 2 * cfg.s_count, rng))
    with de.no_grad():
        clips = model.clips(batch)
        assert clips.shape == (2, 30, 30, 8, 8)
        assert model(batch).shape == (2, 5)
    with pytest.raises(ValueError):
        model(batch_graphs(sensor_graphs(cfg, 3, rng)))


def test_object_model_output_shape():
    cfg = load_model_config("object_small")
    model = build_model(cfg, 0)
    model.eval()
    with de.no_grad():
        out = model(batch_graphs(sensor_graphs(cfg, 3, np.random.default_rng(1), n=40)))
    assert out.shape == (3, 10)


def test_checkpoint_roundtrip(tmp_path):
    from nvsgraph.graph_build import GraphSequence
    cfg = load_model_config("desk_object")
    model = build_model(cfg, 7)
    # populate running statistics so that buffers differ from their defaults
    rng = np.random.default_rng(2)
    graphs = sensor_graphs(cfg, 6, rng, n=50)
    model(batch_graphs(graphs))
    model.eval()
    save_checkpoint(tmp_path / "m.ckp", model, cfg, {"epoch": 3})
    loaded, cfg2, meta = load_checkpoint(tmp_path / "m.ckp")
    assert cfg2 == cfg and meta == {"epoch": 3}
    sd, sd2 = model.state_dict(), loaded.state_dict()
    assert sd.keys() == sd2.keys() and all(np.array_equal(sd[k], sd2[k]) for k in sd)
    data = [GraphSequence([g], i % 2) for i, g in enumerate(graphs)]
    r1, r2 = evaluate(model, data, 2), evaluate(loaded, data, 2)
    assert r1.loss == r2.loss and r1.accuracy == r2.accuracy
    # identical state gives a byte-identical file
    save_checkpoint(tmp_path / "again.ckp", loaded, cfg2, meta)
    assert (tmp_path / "m.ckp").read_bytes() == (tmp_path / "again.ckp").read_bytes()


def test_checkpoint_errors(tmp_path):
    cfg = load_model_config("desk_object")
    save_checkpoint(tmp_path / "m.ckp", build_model(cfg, 0), cfg)
    raw = (tmp_path / "m.ckp").read_bytes()
    (tmp_path / "magic.ckp").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.ckp").write_bytes(raw[:-5])
    (tmp_path / "long.ckp").write_bytes(raw + b"\0")
    for name in ("magic", "short", "long"):
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / f"{name}.ckp")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckp", load_model_config("object_small"))
