"""Smoke test for the deepmcp_py extension.

Build first:
    cargo build --release -p deepmcp-python --features extension-module
then run `python3 python/smoke_test.py`. If deepmcp_py is not installed the
script loads target/release/libdeepmcp_py.so directly.
"""

import importlib.util
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    try:
        import deepmcp_py

        return deepmcp_py
    except ImportError:
        pass
    for name in ("libdeepmcp_py.so", "libdeepmcp_py.dylib", "deepmcp_py.dll"):
        path = ROOT / "target" / "release" / name
        if path.exists():
            spec = importlib.util.spec_from_file_location("deepmcp_py", path)
            mod = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(mod)
            return mod
    sys.exit("deepmcp_py not found; build it with cargo first")


def main():
    dm = load_module()

    assert dm.hash_feature("user_id", "u1", 1 << 20) == dm.hash_feature("user_id", "u1", 1 << 20)
    assert dm.auc([0.1, 0.9, 0.5, 0.5], [0, 1, 1, 0]) == 0.875
    assert abs(dm.logloss([0.5] * 10, [0, 1] * 5) - math.log(2)) < 1e-12

    cfg = dm.Config(
        overrides=[
            "world.n_users=150",
            "world.n_ads=40",
            "world.n_ad_clusters=5",
            "world.impressions_per_user=30",
            "train.hash_space=4096",
            "train.layer_dims=16,8",
            "train.repr_dim=8",
            "train.batch_size=32",
            "train.epochs=2",
            "train.eval_every=25",
            "train.learning_rate=0.05",
        ]
    )
    assert cfg.get("train.embedding_dim") == "10"
    assert dm.Config().get("train.layer_dims") == "512,256"

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        train_path, val_path, test_path, schema_path = dm.generate(tmp / "data", cfg)
        schema = dm.Schema.load(schema_path)
        assert [f[1] for f in schema.fields()] == ["user", "ad", "ad", "other"]

        model = dm.train(tmp / "data", cfg, "deepmcp")
        assert model.has_aux_towers()
        auc, ll = model.evaluate(test_path)
        assert 0.5 < auc <= 1.0 and ll > 0.0

        model.reset_counts()
        scores = model.predict(test_path)
        pred, match, corr = model.subnet_calls()
        assert pred == len(scores) and match == 0 and corr == 0

        model.save(tmp / "m.ckpt")
        back = dm.Model.load(tmp / "m.ckpt")
        assert back.evaluate(test_path) == (auc, ll)
        assert back.stripped().predict(test_path) == scores

        try:
            dm.Config(overrides=["train.nope=1"])
        except ValueError:
            pass
        else:
            raise AssertionError("unknown key accepted")

        print(f"deepmcp_py smoke test ok: test auc={auc:.4f} logloss={ll:.4f} on {len(scores)} impressions")


if __name__ == "__main__":
    main()
