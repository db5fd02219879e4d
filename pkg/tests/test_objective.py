import math

import numpy as np
import pytest
import torch

from gaitfrail.backbones.config import ConfigError
from gaitfrail.objective import (
    ClassWeights,
    FrailtyHead,
    LossConfig,
    batch_all_triplet,
    inverse_sqrt_weights,
    joint_loss,
    weighted_cross_entropy,
)


# ---------------------------------------------------------------- oracles

def ce_oracle(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray | None) -> float:
    """Direct summation: softmax per sample, weighted NLL mean."""
    total = 0.0
    denom = 0.0
    for row, y in zip(logits, labels):
        shifted = row - row.max()
        probs = np.exp(shifted) / np.exp(shifted).sum()
        w = 1.0 if weights is None else weights[y]
        total += w * -math.log(probs[y])
        denom += w
    return total / denom


def triplet_oracle(embeddings: np.ndarray, labels: np.ndarray, margin: float) -> tuple[float, int]:
    """Exhaustive triple enumeration, mean over positive terms, averaged over parts."""
    b, p, _ = embeddings.shape
    per_part = []
    n_valid = 0
    for part in range(p):
        terms = []
        count = 0
        for a in range(b):
            for pos in range(b):
                for neg in range(b):
                    if a == pos or labels[a] != labels[pos] or labels[a] == labels[neg]:
                        continue
                    count += 1
                    d_ap = np.linalg.norm(embeddings[a, part] - embeddings[pos, part])
                    d_an = np.linalg.norm(embeddings[a, part] - embeddings[neg, part])
                    value = max(0.0, margin + d_ap - d_an)
                    if value > 0:
                        terms.append(value)
        per_part.append(float(np.mean(terms)) if terms else 0.0)
        n_valid = count
    return float(np.mean(per_part)), n_valid


# ---------------------------------------------------------------- class weights

class TestInverseSqrtWeights:
    def test_paper_cohort_counts(self):
        w = inverse_sqrt_weights((25, 24, 17)).weights
        raw = 1 / np.sqrt([25, 24, 17])
        expected = raw / raw.mean()
        assert np.allclose(w, expected, atol=1e-12)
        assert np.allclose(w, (0.9279, 0.9470, 1.1252), atol=1e-4)

    def test_equal_counts(self):
        assert inverse_sqrt_weights((10, 10, 10)).weights == (1.0, 1.0, 1.0)

    def test_closed_form_powers(self):
        w = inverse_sqrt_weights((1, 4, 16)).weights
        assert np.allclose(w, (12 / 7, 6 / 7, 3 / 7), atol=1e-12)

    def test_scale_invariance(self):
        a = inverse_sqrt_weights((25, 24, 17)).weights
        b = inverse_sqrt_weights((250, 240, 170)).weights
        assert np.allclose(a, b, atol=1e-12)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            inverse_sqrt_weights((10, 0, 5))

    def test_mean_one_invariant(self):
        w = inverse_sqrt_weights((7, 13, 29)).weights
        assert abs(sum(w) / 3 - 1.0) <= 1e-12

    def test_class_weights_validation(self):
        with pytest.raises(ValueError, match="mean 1"):
            ClassWeights((2.0, 1.0, 1.0))
        with pytest.raises(ValueError, match="positive"):
            ClassWeights((3.0, -1.0, 1.0))


# ---------------------------------------------------------------- cross-entropy

class TestWeightedCrossEntropy:
    def test_confident_correct_is_zero(self):
        logits = torch.eye(3)[torch.tensor([0, 1, 2])] * 1e6
        loss = weighted_cross_entropy(logits, torch.tensor([0, 1, 2]))
        assert float(loss) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_logits_ln3(self):
        logits = torch.zeros(5, 3, dtype=torch.float64)
        loss = weighted_cross_entropy(logits, torch.tensor([0, 2, 1, 1, 0]))
        assert float(loss) == pytest.approx(math.log(3), abs=1e-12)

    def test_two_sample_weighted_hand_case(self):
        # spec's raw (2, 1, 1) weighting, normalized to mean 1
        weights = ClassWeights((1.5, 0.75, 0.75))
        logits = torch.tensor([[2.0, 0.5, -1.0], [0.1, 0.2, 0.3]], dtype=torch.float64)
        labels = torch.tensor([0, 2])
        loss = weighted_cross_entropy(logits, labels, weights)
        oracle = ce_oracle(logits.numpy(), labels.numpy(), np.array(weights.weights))
        assert float(loss) == pytest.approx(oracle, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_batches_match_direct_summation(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(8, 3))
        labels = rng.integers(0, 3, size=8)
        weights = inverse_sqrt_weights(tuple(rng.integers(1, 40, size=3).tolist()))
        loss = weighted_cross_entropy(
            torch.tensor(logits), torch.tensor(labels), weights
        )
        assert float(loss) == pytest.approx(
            ce_oracle(logits, labels, np.array(weights.weights)), abs=1e-10
        )

    def test_logit_shift_invariance(self):
        rng = np.random.default_rng(1)
        logits = torch.tensor(rng.normal(size=(6, 3)))
        labels = torch.tensor(rng.integers(0, 3, size=6))
        base = float(weighted_cross_entropy(logits, labels))
        shifted = float(weighted_cross_entropy(logits + 1234.5, labels))
        assert abs(base - shifted) < 1e-9

    def test_extreme_logits_stable(self):
        logits = torch.tensor([[1e4, -1e4, 0.0]])
        loss = weighted_cross_entropy(logits, torch.tensor([1]))
        assert torch.isfinite(loss)


# ---------------------------------------------------------------- triplet

class TestBatchAllTriplet:
    def test_single_class_gives_zero_and_empty(self):
        emb = torch.rand(4, 2, 8)
        loss, count = batch_all_triplet(emb, torch.zeros(4, dtype=torch.int64), margin=0.2)
        assert float(loss) == 0.0 and count == 0

    def test_far_negative_hand_case(self):
        emb = torch.tensor([[0.0], [0.0], [10.0]]).unsqueeze(1)  # (3, 1, 1)
        labels = torch.tensor([0, 0, 1])
        loss, count = batch_all_triplet(emb, labels, margin=0.2)
        assert float(loss) == pytest.approx(0.0)
        assert count == 2  # both (anchor, positive) orderings of the class-0 pair

    def test_three_point_hand_case(self):
        emb = torch.tensor([[0.0], [1.0], [0.5]]).unsqueeze(1)
        labels = torch.tensor([0, 0, 1])
        loss, count = batch_all_triplet(emb, labels, margin=0.2)
        oracle, oracle_count = triplet_oracle(emb.numpy(), labels.numpy(), 0.2)
        assert float(loss) == pytest.approx(oracle, abs=1e-7)
        assert float(loss) == pytest.approx(0.7, abs=1e-7)
        assert count == oracle_count == 2

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        emb = torch.tensor(rng.normal(size=(6, 3, 4)))
        labels = torch.tensor(rng.integers(0, 3, size=6))
        labels[0], labels[1] = 0, 1
        loss, count = batch_all_triplet(emb, labels, margin=0.3)
        oracle, oracle_count = triplet_oracle(emb.numpy(), labels.numpy(), 0.3)
        assert float(loss) == pytest.approx(oracle, abs=1e-9)
        assert count == oracle_count

    def test_rigid_rotation_invariance(self):
        rng = np.random.default_rng(7)
        emb = torch.tensor(rng.normal(size=(6, 2, 5)))
        labels = torch.tensor([0, 0, 1, 1, 2, 2])
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        rotated = torch.tensor(emb.numpy() @ q)
        a, _ = batch_all_triplet(emb, labels, margin=0.2)
        b, _ = batch_all_triplet(rotated, labels, margin=0.2)
        assert float(a) == pytest.approx(float(b), abs=1e-9)

    def test_2d_embeddings_accepted(self):
        emb = torch.tensor([[0.0], [1.0], [0.5]])
        labels = torch.tensor([0, 0, 1])
        loss, count = batch_all_triplet(emb, labels, margin=0.2)
        assert float(loss) == pytest.approx(0.7, abs=1e-7)


# ---------------------------------------------------------------- head

class TestFrailtyHead:
    def _constant_fm(self, value=0.3, b=2, t=3, c=6, h=8, w=5):
        return torch.full((b, t, c, h, w), value)

    def test_constant_map_parts_identical(self):
        head = FrailtyHead(in_channels=6, feature_height=8, part_count=4, embed_dim=7)
        with torch.no_grad():
            head.part_fcs.copy_(head.part_fcs[0].expand_as(head.part_fcs))
        head.eval()
        embeddings, _ = head(self._constant_fm())
        for part in range(1, 4):
            assert torch.allclose(embeddings[:, part], embeddings[:, 0], atol=1e-7)

    def test_constant_map_logits_independent_of_part_count(self):
        head4 = FrailtyHead(in_channels=6, feature_height=8, part_count=4, embed_dim=7,
                            init_seed=3)
        head1 = FrailtyHead(in_channels=6, feature_height=8, part_count=1, embed_dim=7,
                            init_seed=99)
        with torch.no_grad():
            head4.part_fcs.copy_(head4.part_fcs[0].expand_as(head4.part_fcs))
            head1.part_fcs.copy_(head4.part_fcs[:1])
            head1.classifier.weight.copy_(head4.classifier.weight)
        head4.eval()
        head1.eval()
        fm = self._constant_fm()
        _, logits4 = head4(fm)
        _, logits1 = head1(fm)
        assert torch.allclose(logits4, logits1, atol=1e-6)

    def test_p1_degenerates_to_global_pooling(self):
        head = FrailtyHead(in_channels=6, feature_height=8, part_count=1, embed_dim=7)
        _, logits = head(torch.rand(3, 2, 6, 8, 5))
        assert logits.shape == (3, 3)

    def test_bottom_strip_oracle(self):
        head = FrailtyHead(in_channels=6, feature_height=8, part_count=4, embed_dim=7)
        fm = torch.zeros(2, 3, 6, 8, 5)
        fm[:, :, :, 6:, :] = torch.rand(2, 3, 6, 2, 5)  # bottom strip = part 3
        embeddings, _ = head(fm)
        assert torch.equal(embeddings[:, :3], torch.zeros_like(embeddings[:, :3]))
        assert embeddings[:, 3].abs().sum() > 0

    def test_indivisible_strips_rejected(self):
        with pytest.raises(ConfigError, match="not divisible"):
            FrailtyHead(in_channels=6, feature_height=6, part_count=4)

    def test_temporal_max_pooling(self):
        head = FrailtyHead(in_channels=2, feature_height=4, part_count=2, embed_dim=3)
        head.eval()
        fm = torch.zeros(1, 4, 2, 4, 3)
        fm[0, 2] = 1.0  # only one frame carries signal; max pooling must keep it
        emb_multi, _ = head(fm)
        emb_single, _ = head(fm[:, 2:3])
        assert torch.allclose(emb_multi, emb_single, atol=1e-7)


# ---------------------------------------------------------------- joint loss

class TestJointLoss:
    def _setup(self, seed=0, b=6):
        rng = np.random.default_rng(seed)
        fm = torch.tensor(rng.normal(size=(b, 2, 6, 8, 5)).astype(np.float32))
        labels = torch.tensor(rng.integers(0, 3, size=b))
        labels[0], labels[1] = 0, 1
        head = FrailtyHead(in_channels=6, feature_height=8, part_count=4, embed_dim=7,
                           init_seed=seed)
        head.eval()
        return fm, labels, head

    def test_triplet_weight_zero_equals_ce(self):
        fm, labels, head = self._setup()
        total, breakdown = joint_loss(fm, labels, head, LossConfig(lambda_triplet=0.0))
        assert breakdown.total == pytest.approx(breakdown.ce, abs=1e-7)

    def test_ce_weight_zero_single_class_batch(self):
        fm, _, head = self._setup()
        labels = torch.zeros(6, dtype=torch.int64)
        total, breakdown = joint_loss(fm, labels, head, LossConfig(lambda_ce=0.0))
        assert breakdown.total == 0.0
        assert breakdown.valid_triplet_count == 0

    def test_recomposition(self):
        fm, labels, head = self._setup(seed=3)
        cfg = LossConfig(lambda_ce=0.7, lambda_triplet=1.3, margin=0.25)
        total, breakdown = joint_loss(fm, labels, head, cfg)
        embeddings, logits = head(fm)
        ce = float(weighted_cross_entropy(logits, labels))
        tri, _ = batch_all_triplet(embeddings, labels, margin=0.25)
        assert breakdown.total == pytest.approx(0.7 * ce + 1.3 * float(tri), abs=1e-6)
        assert float(total) == pytest.approx(breakdown.total, abs=1e-7)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        rng = np.random.default_rng(5)
        fm = torch.tensor(rng.normal(size=(6, 2, 6, 8, 5)))
        labels = torch.tensor([0, 0, 1, 1, 2, 2])
        head = FrailtyHead(in_channels=6, feature_height=8, part_count=4, embed_dim=7,
                           init_seed=5).double()
        head.train()
        cfg = LossConfig(margin=0.2)

        def loss_value():
            total, _ = joint_loss(fm, labels, head, cfg)
            return total

        total = loss_value()
        params = [p for p in head.parameters() if p.requires_grad]
        grads = torch.autograd.grad(total, params)
        flat_grad = torch.cat([g.reshape(-1) for g in grads])
        flat_params = torch.cat([p.reshape(-1) for p in params])
        picks = rng.choice(len(flat_params), size=32, replace=False)

        offset = 0
        index_map = []
        for p in params:
            n = p.numel()
            index_map.append((offset, offset + n, p))
            offset += n

        for flat_index in picks:
            for start, end, p in index_map:
                if start <= flat_index < end:
                    local = flat_index - start
                    break
            h = 1e-6 * max(1.0, float(flat_params[flat_index].abs()))
            with torch.no_grad():
                original = p.reshape(-1)[local].item()
                p.reshape(-1)[local] = original + h
                up = float(loss_value())
                p.reshape(-1)[local] = original - h
                down = float(loss_value())
                p.reshape(-1)[local] = original
            numeric = (up - down) / (2 * h)
            analytic = float(flat_grad[flat_index])
            denom = max(abs(numeric), abs(analytic), 1e-8)
            assert abs(numeric - analytic) / denom < 1e-4, (
                f"param entry {flat_index}: analytic {analytic} vs numeric {numeric}"
            )
