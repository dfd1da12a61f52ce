"""End-to-end classifier: patchify round trips, embedding structure,
length ledger, residual identity, loss formula, checkpoint container."""

import numpy as np
import pytest

from fambav import fusion, scheduler as sched
from fambav import tensor as tn
from fambav.errors import ConfigError, FormatError, IndexRangeError, PlanError
from fambav.model import (ModelConfig, classify_loss, embed, init_model,
                          load_checkpoint, patchify, save_checkpoint, unpatchify)
from fambav.tensor import Tensor
from helpers import fd_gradcheck

TINY = ModelConfig(image_h=8, image_w=8, channels=3, patch=2, dim=8, e_dim=16,
                   n_state=4, l_total=2, n_classes=3, dtype="float64")


def no_plan(cfg: ModelConfig) -> sched.FusionPlan:
    return sched.build_plan(sched.Strategy("none"), cfg.l_total, 0, cfg.seq_len)


class TestPatchify:
    def test_unit_patches_row_major(self):
        cfg = ModelConfig(image_h=2, image_w=2, channels=1, patch=1, n_classes=2)
        img = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = patchify(img, cfg)
        assert out.data.tolist() == [[[1.0], [2.0], [3.0], [4.0]]]

    def test_single_patch_is_whole_image(self):
        cfg = ModelConfig(image_h=4, image_w=4, channels=2, patch=4, n_classes=2)
        rng = np.random.default_rng(0)
        img = rng.normal(size=(1, 2, 4, 4))
        out = patchify(img, cfg)
        assert out.shape == (1, 1, 32)
        # Row-major (P, P, C) flattening of the block.
        assert np.array_equal(out.data[0, 0], img[0].transpose(1, 2, 0).reshape(-1))

    def test_reassembly_round_trip(self):
        cfg = ModelConfig(image_h=8, image_w=8, channels=3, patch=4, n_classes=2)
        rng = np.random.default_rng(1)
        img = rng.normal(size=(2, 3, 8, 8))
        patches = patchify(img, cfg)
        assert np.array_equal(unpatchify(patches.data, cfg), img)

    def test_indivisible_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_h=10, image_w=10, patch=4, n_classes=2)

    def test_wrong_image_shape_rejected(self):
        with pytest.raises(ConfigError):
            patchify(np.zeros((1, 3, 16, 16)), TINY)


class TestEmbed:
    def test_zero_patches_zero_positions(self):
        model = init_model(TINY, seed=0)
        model.embed_params.pos_embed.data[:] = 0.0
        patches = Tensor(np.zeros((2, TINY.n_patches, TINY.patch_dim)))
        seq = embed(patches, model.embed_params)
        assert seq.length == TINY.n_patches + 1
        assert np.array_equal(seq.values.data[:, 0], np.tile(model.embed_params.cls_token.data, (2, 1)))
        assert np.abs(seq.values.data[:, 1:]).max() == 0.0

    def test_additive_position_structure(self):
        model = init_model(TINY, seed=0)
        model.embed_params.proj.data[:] = 0.0
        rows = np.arange(TINY.seq_len, dtype=np.float64)
        model.embed_params.pos_embed.data[:] = rows[:, None]
        patches = Tensor(np.zeros((1, TINY.n_patches, TINY.patch_dim)))
        seq = embed(patches, model.embed_params)
        expect0 = model.embed_params.cls_token.data + 0.0
        assert np.array_equal(seq.values.data[0, 0], expect0)
        for r in range(1, TINY.seq_len):
            assert np.array_equal(seq.values.data[0, r], np.full(TINY.dim, float(r)))

    def test_pos_embed_gradient(self):
        model = init_model(TINY, seed=1)
        rng = np.random.default_rng(2)
        images = rng.normal(size=(2, 3, 8, 8))
        targets = np.array([0, 2])

        def loss():
            logits, _ = model.forward(images, no_plan(TINY))
            return classify_loss(logits, targets, smoothing=0.1)

        fd_gradcheck(loss, [model.embed_params.pos_embed], sample=8)


class TestForward:
    def test_identity_stack_reads_embedded_cls(self):
        model = init_model(TINY, seed=3)
        for layer in model.layers:
            layer.out_w.data[:] = 0.0
        rng = np.random.default_rng(4)
        images = rng.normal(size=(2, 3, 8, 8))
        logits, lengths = model.forward(images, no_plan(TINY))
        assert lengths == [TINY.seq_len] * TINY.l_total
        patches = patchify(images, TINY)
        seq0 = embed(patches, model.embed_params)
        cls = seq0.values.data[:, 0]
        feat = tn.layernorm(Tensor(cls), model.head_norm_gain, model.head_norm_bias)
        expect = feat.data @ model.head_w.data + model.head_b.data
        assert np.abs(logits.data - expect).max() < 1e-12

    def test_length_ledger_matches_plan(self):
        cfg = ModelConfig(image_h=32, image_w=32, patch=4, dim=8, e_dim=16,
                          n_state=2, l_total=8, n_classes=4, dtype="float64")
        plan = sched.build_plan(sched.Strategy("upper", start=6), 8, 9, cfg.seq_len)
        model = init_model(cfg, seed=5)
        rng = np.random.default_rng(6)
        images = rng.normal(size=(1, 3, 32, 32))
        _, lengths = model.forward(images, plan)
        assert lengths == sched.token_steps(plan, cfg.seq_len)[1]
        assert lengths[-1] == 65 - 27 == 38

    def test_full_depth_token_budget_final_length(self):
        cfg = ModelConfig(image_h=112, image_w=112, patch=8, dim=4, e_dim=8,
                          n_state=2, l_total=24, n_classes=4, dtype="float64")
        assert cfg.seq_len == 197
        plan = sched.build_plan(sched.Strategy("all"), 24, 7, 197)
        model = init_model(cfg, seed=7)
        rng = np.random.default_rng(8)
        images = rng.normal(size=(1, 3, 112, 112))
        with tn.no_grad():
            _, lengths = model.forward(images, plan)
        assert lengths[-1] == 29
        assert lengths == sched.token_steps(plan, 197)[1]

    def test_infeasible_plan_rejected_before_compute(self):
        model = init_model(TINY, seed=9)
        bad = sched.FusionPlan(r=(10, 10), seq_len=TINY.seq_len)
        with pytest.raises(PlanError):
            model.forward(np.zeros((1, 3, 8, 8)), bad)

    def test_plan_layer_count_mismatch(self):
        model = init_model(TINY, seed=9)
        with pytest.raises(PlanError):
            model.forward(np.zeros((1, 3, 8, 8)),
                          sched.FusionPlan(r=(0, 0, 0), seq_len=TINY.seq_len))

    def test_class_token_never_fused_in_trace(self):
        cfg = ModelConfig(image_h=16, image_w=16, patch=2, dim=8, e_dim=16,
                          n_state=2, l_total=4, n_classes=4, dtype="float64")
        plan = sched.build_plan(sched.Strategy("all"), 4, 6, cfg.seq_len)
        model = init_model(cfg, seed=10)
        rng = np.random.default_rng(11)
        trace: list = []
        with tn.no_grad():
            model.forward(rng.normal(size=(2, 3, 16, 16)), plan, trace=trace)
        assert len(trace) == 4 * 6 * 2  # layers * r * batch
        assert all(a != 0 and b != 0 for _, a, b, _ in trace)

    def test_residual_identity_with_zeroed_blocks(self):
        # With all block out-projections zeroed, the final sequence equals
        # the embedded sequence pushed through the fusion cascade alone.
        cfg = ModelConfig(image_h=16, image_w=16, patch=4, dim=8, e_dim=16,
                          n_state=2, l_total=3, n_classes=4, dtype="float64")
        plan = sched.build_plan(sched.Strategy("all"), 3, 2, cfg.seq_len)
        model = init_model(cfg, seed=12)
        for layer in model.layers:
            layer.out_w.data[:] = 0.0
        rng = np.random.default_rng(13)
        images = rng.normal(size=(2, 3, 16, 16))
        seq, _ = model.forward_tokens(images, plan)
        expect = embed(patchify(images, cfg), model.embed_params).values
        sizes = None
        for r in plan.r:
            expect, sizes, _ = fusion.fuse_layer(expect, r, sizes=sizes)
        assert np.abs(seq.values.data - expect.data).max() < 1e-12

    def test_full_model_gradient_check(self):
        cfg = ModelConfig(image_h=8, image_w=8, patch=2, dim=8, e_dim=16,
                          n_state=4, l_total=2, n_classes=3, dtype="float64")
        model = init_model(cfg, seed=14)
        # Head starts at zero; nudge it so gradients reach every parameter.
        rng = np.random.default_rng(15)
        model.head_w.data[:] = rng.normal(0.0, 0.05, size=model.head_w.data.shape)
        images = rng.normal(size=(2, 3, 8, 8))
        targets = np.array([0, 2])
        plan = sched.build_plan(sched.Strategy("interleaved"), 2, 2, cfg.seq_len)
        params = [t for _, t in model.named_parameters()]

        def loss():
            logits, _ = model.forward(images, plan)
            return classify_loss(logits, targets, smoothing=0.1)

        fd_gradcheck(loss, params, h=1e-5, rel_tol=1e-4, sample=4)


class TestClassifyLoss:
    def test_uniform_logits_give_log_n(self):
        logits = Tensor(np.zeros((2, 7)))
        loss = classify_loss(logits, np.array([1, 4]), smoothing=0.0)
        assert abs(loss.data - np.log(7)) < 1e-12

    def test_saturated_correct_logit(self):
        logits = Tensor(np.array([[40.0, 0.0, 0.0]]))
        loss = classify_loss(logits, np.array([0]), smoothing=0.0)
        assert loss.data < 1e-12

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(16)
        logits = rng.normal(size=(5, 9))
        targets = rng.integers(0, 9, size=5)
        eps = 0.13
        loss = classify_loss(Tensor(logits), targets, smoothing=eps)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        q = np.full((5, 9), eps / 9)
        q[np.arange(5), targets] += 1 - eps
        assert abs(loss.data - (-(q * logp).sum(axis=1).mean())) < 1e-10

    def test_target_out_of_range(self):
        with pytest.raises(IndexRangeError):
            classify_loss(Tensor(np.zeros((1, 3))), np.array([3]))

    def test_bad_smoothing(self):
        with pytest.raises(ConfigError):
            classify_loss(Tensor(np.zeros((1, 3))), np.array([0]), smoothing=1.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = init_model(TINY, seed=17)
        rng = np.random.default_rng(18)
        for _, p in model.named_parameters():
            p.data = rng.normal(size=p.data.shape)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, str(path))
        loaded = load_checkpoint(str(path))
        assert loaded.config == model.config
        for (n1, p1), (n2, p2) in zip(model.named_parameters(),
                                      loaded.named_parameters()):
            assert n1 == n2
            assert np.array_equal(p1.data.astype(np.float32), p2.data.astype(np.float32))

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(init_model(TINY, seed=19), str(a))
        save_checkpoint(init_model(TINY, seed=19), str(b))
        assert a.read_bytes() == b.read_bytes()

    def test_magic_guard(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"NOTAMODEL")
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(str(path))

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(init_model(TINY, seed=20), str(path))
        raw = path.read_bytes()
        path.write_bytes(raw + b"junk")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(str(path))
