import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patch2img.metrics import (
    Confusion,
    auc_roc,
    auprc,
    confusion_metrics,
    evaluate,
    roc_curve,
)


def pairwise_auc(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie), by brute force over all pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


class TestConfusion:
    def test_hand_example(self):
        c = Confusion(tp=3, tn=4, fp=2, fn=1)
        assert c.sens == 0.75
        assert c.spec == pytest.approx(2 / 3)
        assert c.acc == 0.7
        assert c.dice == pytest.approx(2 / 3)
        assert c.jaccard == 0.5

    def test_from_arrays(self):
        probs = np.array([0.9, 0.8, 0.7, 0.6, 0.6, 0.1, 0.2, 0.3, 0.4, 0.2])
        mask = np.array([1, 1, 1, 0, 0, 1, 0, 0, 0, 0])
        m = confusion_metrics(probs, mask)
        assert (m["tp"], m["tn"], m["fp"], m["fn"]) == (3, 4, 2, 1)

    def test_threshold_inclusive(self):
        assert confusion_metrics([0.5], [1])["tp"] == 1

    def test_perfect(self):
        mask = np.array([0, 1, 1, 0])
        m = confusion_metrics(mask.astype(float), mask)
        assert all(m[k] == 1.0 for k in ("sens", "spec", "acc", "dice", "jaccard"))

    def test_all_positive_spec_defined(self):
        m = confusion_metrics(np.ones(4), np.ones(4))
        assert m["spec"] == 1.0

    def test_inverted(self):
        mask = np.array([0, 1, 1, 0])
        m = confusion_metrics(1.0 - mask, mask)
        assert m["sens"] == 0 and m["spec"] == 0

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            confusion_metrics(np.array([]), np.array([]))

    def test_fov_excludes_pixels(self):
        probs = np.array([1.0, 1.0, 0.0])
        mask = np.array([1, 0, 0])
        m = confusion_metrics(probs, mask, fov=np.array([1, 0, 1]))
        assert m["fp"] == 0 and m["tn"] == 1

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            confusion_metrics(np.zeros(3), np.zeros(4))


class TestAUC:
    def test_hand_example(self):
        assert auc_roc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75, abs=1e-12)
        assert pairwise_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_separated(self):
        assert auc_roc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_tied(self):
        assert auc_roc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(ValueError, match="one class"):
            auc_roc([0.1, 0.2], [1, 1])

    def test_pairwise_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 400))
            scores = rng.integers(0, 20, n) / 20.0  # plenty of ties
            labels = rng.random(n) < 0.4
            labels[:2] = [True, False]
            assert abs(auc_roc(scores, labels) - pairwise_auc(scores, labels)) < 1e-9

    def test_matches_sklearn(self, rng):
        from sklearn.metrics import average_precision_score, roc_auc_score

        for _ in range(20):
            n = int(rng.integers(10, 500))
            scores = np.round(rng.random(n), 2)
            labels = rng.random(n) < 0.3
            labels[:2] = [True, False]
            assert auc_roc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)
            assert auprc(scores, labels) == pytest.approx(
                average_precision_score(labels, scores), abs=1e-12)

    def test_curve_endpoints(self, rng):
        fpr, tpr, _ = roc_curve(rng.random(50), np.arange(50) % 2)
        assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0, 0, 1, 1)
        assert (np.diff(fpr) >= 0).all() and (np.diff(tpr) >= 0).all()

    def test_auprc_perfect(self):
        assert auprc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_invariant_to_monotone_transform(self, seed):
        r = np.random.default_rng(seed)
        scores = r.random(60)
        labels = np.arange(60) % 3 == 0
        a = auc_roc(scores, labels)
        assert auc_roc(np.exp(3 * scores), labels) == pytest.approx(a, abs=1e-12)
        assert auprc(scores**2, labels) == pytest.approx(auprc(scores, labels), abs=1e-12)


class TestEvaluate:
    def test_jaccard_dice_relation(self, rng):
        for _ in range(20):
            probs = [rng.random((8, 8)) for _ in range(3)]
            masks = [rng.random((8, 8)) > 0.6 for _ in range(3)]
            rep = evaluate(probs, masks)
            assert abs(rep.jaccard - rep.dice / (2 - rep.dice)) < 1e-12
            for d, j in zip(rep.per_image["dice"], rep.per_image["jaccard"]):
                assert abs(j - d / (2 - d)) < 1e-12

    def test_pooled_counts(self, rng):
        probs = [rng.random((4, 4)) for _ in range(2)]
        masks = [rng.random((4, 4)) > 0.5 for _ in range(2)]
        rep = evaluate(probs, masks, ids=["a", "b"])
        assert rep.tp + rep.tn + rep.fp + rep.fn == 32
        assert rep.image_ids == ["a", "b"]
        assert len(rep.per_image["auc"]) == 2

    def test_single_class_image_gets_nan(self, rng):
        rep = evaluate([rng.random((4, 4)), rng.random((4, 4))],
                       [np.zeros((4, 4)), rng.random((4, 4)) > 0.5])
        assert np.isnan(rep.per_image["auc"][0])
        assert np.isfinite(rep.auc)

    def test_save(self, rng, tmp_path):
        import json

        rep = evaluate([rng.random((4, 4))], [rng.random((4, 4)) > 0.5])
        rep.save(tmp_path / "m.json")
        data = json.loads((tmp_path / "m.json").read_text())
        assert set(rep.summary()) <= set(data)

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate([], [])
