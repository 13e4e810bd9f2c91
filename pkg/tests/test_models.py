from pathlib import Path

import numpy as np
import pytest

from tepalab.errors import ConfigError, UnsupportedOperationError, VersionError
from tepalab.models import (
    ArchSpec,
    Checkpoint,
    PlainModel,
    YModel,
    build_model,
    count_parameters,
    forward_main,
    forward_ssl,
    load_checkpoint,
    predict,
    restore,
    save_checkpoint,
    snapshot,
)
from tepalab.nn.layers import NormMode
from tepalab.nn.ops import softmax_np

GOLDEN = Path(__file__).parent / "golden"
TINY = ArchSpec("cnn4", widths=(4, 8), num_classes=3, seed=7)


def _x(n=4, size=8, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32)


def conv_block_params(cin, cout):
    return cout * cin * 9 + 2 * cout  # bias-free 3x3 conv + norm affine


class TestBuild:
    def test_kinds(self):
        assert isinstance(build_model(ArchSpec()), PlainModel)
        assert isinstance(build_model(ArchSpec(split_point=2)), YModel)

    def test_norm_defaults(self):
        assert build_model(ArchSpec()).norm_layers  # plain: batch norm
        assert not build_model(ArchSpec(split_point=2)).norm_layers  # Y: group norm

    @pytest.mark.parametrize("split", [0, 5, -1])
    def test_split_out_of_range(self, split):
        with pytest.raises(ConfigError):
            build_model(ArchSpec(split_point=split))

    def test_unknown_template(self):
        with pytest.raises(ConfigError):
            build_model(ArchSpec("resnet18"))

    def test_split_at_last_block_branches_are_heads(self):
        m = build_model(ArchSpec(split_point=4))
        assert len(m.main_blocks) == 0 and len(m.ssl_blocks) == 0
        assert [n for n, _ in m.named_parameters() if n.startswith(("main", "ssl"))] == [
            "main_head.fc.weight", "main_head.fc.bias", "ssl_head.fc.weight", "ssl_head.fc.bias"]

    def test_same_seed_identical_checkpoints(self):
        a = snapshot(build_model(ArchSpec(split_point=2, seed=3))).to_bytes()
        b = snapshot(build_model(ArchSpec(split_point=2, seed=3))).to_bytes()
        assert a == b

    def test_ssl_branch_copies_main_blocks(self):
        m = build_model(ArchSpec(split_point=2))
        for (na, a), (nb, b) in zip(m.main_blocks.named_parameters(), m.ssl_blocks.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(a.data, b.data)
            assert a is not b

    def test_parameter_count(self):
        widths, c = (16, 32, 64, 64), 10
        m = build_model(ArchSpec(split_point=2))
        cins = (3,) + widths[:-1]
        blocks = [conv_block_params(i, o) for i, o in zip(cins, widths)]
        expected = sum(blocks[:2]) + 2 * sum(blocks[2:]) + (64 * c + c) + (64 * 4 + 4)
        assert count_parameters(m.parameters()) == expected
        parts = m.partitions()
        assert sum(count_parameters(v) for v in parts.values()) == expected


class TestForward:
    def test_shapes_and_finite(self):
        y = build_model(ArchSpec(split_point=2))
        x = _x(3, 32)
        assert forward_main(y, x, NormMode.EVAL).shape == (3, 10)
        assert forward_ssl(y, x).shape == (3, 4)
        assert np.isfinite(forward_main(y, x).data).all()

    def test_softmax_sums_to_one(self):
        z = forward_main(build_model(ArchSpec()), _x(5, 32), NormMode.EVAL).data
        np.testing.assert_allclose(softmax_np(z).sum(axis=1), 1.0, atol=1e-6)

    def test_eval_deterministic(self):
        m = build_model(ArchSpec())
        x = _x(2, 32)
        a = forward_main(m, x, NormMode.EVAL).data
        b = forward_main(m, x, NormMode.EVAL).data
        assert a.tobytes() == b.tobytes()

    def test_ssl_on_plain_unsupported(self):
        with pytest.raises(UnsupportedOperationError):
            forward_ssl(build_model(ArchSpec()), _x(1, 32))

    def test_shared_extractor_activations(self):
        m = build_model(ArchSpec(split_point=2))
        x = _x(2, 32)
        seen = []
        orig = m.extractor.forward
        m.extractor.forward = lambda t: seen.append(orig(t).data) or orig(t)
        forward_main(m, x)
        forward_ssl(m, x)
        np.testing.assert_array_equal(seen[0], seen[1])

    def test_branch_independence(self):
        m = build_model(ArchSpec(split_point=2))
        x = _x(2, 32)
        main0, ssl0 = forward_main(m, x).data, forward_ssl(m, x).data
        for p in m.partitions()["ssl"]:
            p.data = p.data + 0.5
        np.testing.assert_array_equal(forward_main(m, x).data, main0)
        m = build_model(ArchSpec(split_point=2))
        for p in m.partitions()["main"]:
            p.data = p.data - 0.5
        np.testing.assert_array_equal(forward_ssl(m, x).data, ssl0)

    def test_variable_input_size(self):
        m = build_model(ArchSpec())
        assert forward_main(m, _x(2, 48), NormMode.EVAL).shape == (2, 10)

    def test_predict_chunks(self):
        m = build_model(ArchSpec())
        x = _x(7, 32)
        np.testing.assert_array_equal(predict(m, x, batch_size=3), predict(m, x, batch_size=100))


class TestCheckpoint:
    def test_roundtrip_bytes(self, tmp_path):
        m = build_model(ArchSpec(split_point=3, seed=2))
        blob = snapshot(m).to_bytes()
        again = snapshot(restore(Checkpoint.from_bytes(blob))).to_bytes()
        assert blob == again
        save_checkpoint(tmp_path / "m.ckpt", snapshot(m))
        assert load_checkpoint(tmp_path / "m.ckpt").to_bytes() == blob

    def test_restore_reproduces_outputs(self):
        m = build_model(ArchSpec())
        for bn in m.norm_layers:
            bn.rho = 0.03
            bn.set_buffer("running_mean", np.full(bn.channels, 0.2, np.float32))
        r = restore(snapshot(m))
        x = _x(3, 32)
        assert forward_main(m, x, "eval").data.tobytes() == forward_main(r, x, "eval").data.tobytes()
        assert [bn.rho for bn in r.norm_layers] == [0.03] * len(r.norm_layers)

    def test_corrupt_header_rejected_model_untouched(self):
        m = build_model(ArchSpec())
        before = snapshot(m).to_bytes()
        blob = bytearray(snapshot(build_model(ArchSpec(seed=9))).to_bytes())
        blob[0] = 99
        with pytest.raises(VersionError):
            restore(bytes(blob), into=m)
        blob = bytearray(before)
        blob[1:5] = b"XXXX"
        with pytest.raises(VersionError):
            Checkpoint.from_bytes(bytes(blob))
        with pytest.raises(VersionError):
            Checkpoint.from_bytes(before[:40])
        assert snapshot(m).to_bytes() == before

    def test_state_mismatch(self):
        c = snapshot(build_model(ArchSpec()))
        with pytest.raises(ConfigError):
            restore(c, into=build_model(ArchSpec(split_point=2)))

    def test_golden_file(self):
        """The on-disk layout is frozen: a tiny model must serialize to the stored bytes."""
        blob = snapshot(build_model(TINY)).to_bytes()
        assert blob == (GOLDEN / "tiny_plain.ckpt").read_bytes()
        m = restore(load_checkpoint(GOLDEN / "tiny_plain.ckpt"))
        assert m.arch.resolved_widths() == (4, 8)
