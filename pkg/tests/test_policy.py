"""Network assembly: vision encoder probes, mask properties lifted through
the trunk, checkpoint round-trips, and the parameter-count formula."""

import numpy as np
import pytest

from chunkcast import tensor as T
from chunkcast.codecs import ContinuousSpec, DiscreteSpec, PixelSpec
from chunkcast.interleave import ChunkPartition, build_interleaved_mask, interleaved_forward
from chunkcast.policy import PolicyConfig, SequencePolicy, VisionConfig, columns_from_sequences
from chunkcast.tensor import Rng, Tensor

VIS = VisionConfig(raster=16, in_channels=2, stage_channels=(4, 8))


def toy_config(kinds=None, layers=2, dim=16):
    kinds = kinds or (
        DiscreteSpec("pick", 6),
        ContinuousSpec("move", 2, components=2),
    )
    return PolicyConfig(
        layers=layers, dim=dim, mlp_hidden=32, heads=2, max_positions=12,
        kinds=tuple(kinds), vision=VIS,
    )


def toy_policy(seed=0, **kw):
    return SequencePolicy(toy_config(**kw), Rng(seed))


def random_columns(policy, rng, length):
    kinds = list(policy.cfg.kinds)
    cols = []
    for i in range(length):
        spec = kinds[i % len(kinds)]
        if isinstance(spec, DiscreteSpec):
            cols.append((spec.name, rng.integers(0, spec.cardinality, (1,))))
        elif isinstance(spec, ContinuousSpec):
            cols.append((spec.name, rng.normal((1, spec.dim), dtype=np.float64)))
        else:
            rows = rng.integers(0, spec.full_height, (1,))
            colns = rng.integers(0, spec.full_width, (1,))
            cols.append((spec.name, np.stack([rows, colns], axis=-1)))
    return cols


class TestVisionEncoder:
    def test_zero_raster_zero_encoder_gives_zero_featmap(self):
        policy = toy_policy()
        for name, p in policy.vision.named_parameters().items():
            if name.startswith("stages."):
                p.data = np.zeros_like(p.data)
        _, featmap = policy.vision(np.zeros((1, 2, 16, 16)))
        np.testing.assert_array_equal(featmap.data, np.zeros_like(featmap.data))

    def test_bright_pixel_shift_moves_peak_one_cell(self):
        policy = toy_policy(seed=3)
        stride = 16 // VIS.feat_hw  # one feature cell in raster pixels

        def peak(row):
            x = np.zeros((1, 2, 16, 16))
            x[0, :, row, 8] = 1.0
            _, fm = policy.vision(x)
            energy = np.abs(fm.data[0]).sum(axis=0)
            return np.unravel_index(np.argmax(energy), energy.shape)

        r0 = peak(6)
        r1 = peak(6 + stride)
        assert r1[0] == r0[0] + 1
        assert r1[1] == r0[1]

    @pytest.mark.parametrize("raster,hw", [(16, 4), (32, 8)])
    def test_output_shapes(self, raster, hw):
        cfg = PolicyConfig(
            layers=1, dim=16, mlp_hidden=32, heads=2, max_positions=8,
            kinds=(DiscreteSpec("pick", 4),),
            vision=VisionConfig(raster=raster, in_channels=2, stage_channels=(4, 8)),
        )
        policy = SequencePolicy(cfg, Rng(0))
        tokens, featmap = policy.vision(np.zeros((2, 2, raster, raster)))
        assert tokens.shape == (2, hw * hw, 16)
        assert featmap.shape == (2, 8, hw, hw)

    def test_raster_shape_mismatch(self):
        policy = toy_policy()
        with pytest.raises(T.ShapeError):
            policy.vision(np.zeros((1, 2, 8, 8)))


class TestTrunk:
    def test_zero_layers_ignore_vision(self):
        policy = toy_policy(layers=0)
        rng = Rng(1)
        targets = [("pick", 0), ("pick", 1)]
        emb = policy.embed_empties(targets, batch=1)
        mask = build_interleaved_mask(ChunkPartition.from_sizes([2]))
        v1, f1 = policy.vision(rng.uniform((1, 2, 16, 16)))
        v2, f2 = policy.vision(rng.uniform((1, 2, 16, 16)))
        out1 = policy.forward_embeddings(emb, mask, v1)
        out2 = policy.forward_embeddings(emb, mask, v2)
        np.testing.assert_array_equal(out1.data, out2.data)

    def test_vision_sensitivity_with_layers(self):
        policy = toy_policy(seed=5)
        rng = Rng(2)
        emb = policy.embed_empties([("pick", 0), ("pick", 1)], batch=1)
        mask = build_interleaved_mask(ChunkPartition.from_sizes([2]))
        out1 = policy.forward_embeddings(emb, mask, policy.vision(rng.uniform((1, 2, 16, 16)))[0])
        out2 = policy.forward_embeddings(emb, mask, policy.vision(rng.uniform((1, 2, 16, 16)))[0])
        assert not np.allclose(out1.data, out2.data)

    def test_action_outputs_blind_to_empty_contents(self):
        policy = toy_policy(seed=7)
        rng = Rng(3)
        part = ChunkPartition.from_sizes([2, 2], context_len=0)
        cols = random_columns(policy, rng, 4)
        vision_tokens, featmap = policy.vision(rng.uniform((1, 2, 16, 16)))
        mask = build_interleaved_mask(part)
        n_actions = part.boundaries[-1][0]
        act = policy.embed_actions(cols[:n_actions], range(n_actions), featmap)
        targets = [(cols[t][0], t) for s, e in part.boundaries for t in range(s, e)]
        emp = policy.embed_empties(targets, 1)
        base = policy.forward_embeddings(T.concat([act, emp], axis=1), mask, vision_tokens)
        noisy = Tensor(emp.data + rng.normal(emp.shape) * 10)
        pert = policy.forward_embeddings(T.concat([act, noisy], axis=1), mask, vision_tokens)
        assert np.array_equal(base.data[:, :n_actions], pert.data[:, :n_actions])
        assert not np.allclose(base.data[:, n_actions:], pert.data[:, n_actions:])

    def test_causality_through_depth(self):
        # chunks {0,1}, {2,3}, {4,5}: rewriting the action at position 2
        # may only change the empties of the chunk that starts at 4
        policy = toy_policy(seed=9)
        rng = Rng(4)
        part = ChunkPartition.from_sizes([2, 2, 2])
        cols = random_columns(policy, rng, 6)
        vision_tokens, featmap = policy.vision(rng.uniform((1, 2, 16, 16)))

        def run(columns):
            outs = interleaved_forward(policy, columns, (vision_tokens, featmap), part)
            return [o.data.copy() for o in outs]

        base = run(cols)
        bumped = list(cols)
        kind, val = bumped[2]
        spec = next(k for k in policy.cfg.kinds if k.name == kind)
        if isinstance(spec, DiscreteSpec):
            bumped[2] = (kind, (val + 1) % spec.cardinality)
        else:
            bumped[2] = (kind, val + 1.0)
        pert = run(bumped)
        assert np.array_equal(base[0], pert[0])
        assert np.array_equal(base[1], pert[1])
        assert not np.allclose(base[2], pert[2])


class TestPersistence:
    def test_checkpoint_round_trip_bit_identical(self, tmp_path):
        policy = toy_policy(seed=11)
        rng = Rng(5)
        raster = rng.uniform((1, 2, 16, 16))
        cols = random_columns(policy, rng, 4)
        part = ChunkPartition.from_sizes([2, 2])

        def forward(p):
            vision = p.vision(raster)
            outs = interleaved_forward(p, cols, vision, part)
            return [o.data for o in outs]

        want = forward(policy)
        path = tmp_path / "policy.ntc"
        policy.save(path)
        clone = toy_policy(seed=999)  # different init, same architecture
        clone.load(path)
        got = forward(clone)
        for a, b in zip(want, got):
            assert np.array_equal(a, b)

    def test_param_count_matches_formula(self):
        for kinds in (
            None,
            (DiscreteSpec("pick", 9),),
            (
                DiscreteSpec("pick", 5),
                ContinuousSpec("move", 3, components=2),
                PixelSpec("point", 4, 4, upsample=2),
            ),
        ):
            cfg = toy_config(kinds=kinds)
            policy = SequencePolicy(cfg, Rng(0))
            assert policy.num_params() == cfg.param_count()


class TestColumns:
    def test_columns_from_sequences(self):
        from chunkcast.codecs import ActionValue

        seqs = [
            [ActionValue("pick", 2), ActionValue("move", np.array([0.1, 0.2]))],
            [ActionValue("pick", 4), ActionValue("move", np.array([0.3, 0.4]))],
        ]
        cols = columns_from_sequences(seqs)
        assert cols[0][0] == "pick"
        np.testing.assert_array_equal(cols[0][1], [2, 4])
        assert cols[1][1].shape == (2, 2)

    def test_mixed_kind_column_rejected(self):
        from chunkcast.codecs import ActionValue

        seqs = [[ActionValue("pick", 1)], [ActionValue("move", np.zeros(2))]]
        with pytest.raises(ValueError):
            columns_from_sequences(seqs)
