import numpy as np
import pytest

from barlow_adaptor.gradcheck import toy_architecture
from barlow_adaptor.metrics import confusion_counts, macro_accuracy, micro_accuracy, predict
from barlow_adaptor.model import init_params

A, B = 0, 1


def params_with_logits(rows):
    """A model whose classifier emits ``rows`` for one-hot inputs."""
    rows = np.asarray(rows, dtype=np.float64)
    arch = toy_architecture(in_dim=rows.shape[0], hidden=rows.shape[0], feature_dim=rows.shape[0],
                            num_classes=rows.shape[1])
    p = init_params(arch, 0, np.float64)
    n = rows.shape[0]
    p.arrays["extractor.0.weight"][...] = np.eye(n)
    p.arrays["extractor.2.weight"][...] = np.eye(n)
    p.arrays["classifier.0.weight"][...] = rows
    return p


class TestPredict:
    def test_argmax(self):
        p = params_with_logits([[0.2, 0.9, 0.1]])
        assert predict(p, [[1.0]]).tolist() == [1]

    def test_tie_goes_to_lowest(self):
        p = params_with_logits([[0.5, 0.5]])
        assert predict(p, [[1.0]]).tolist() == [0]

    def test_batched_equals_whole(self):
        arch = toy_architecture()
        p = init_params(arch, 0)
        x = np.random.default_rng(0).normal(size=(23, arch.in_dim))
        np.testing.assert_array_equal(predict(p, x, batch_size=4), predict(p, x))


class TestMicro:
    def test_all_correct(self):
        assert micro_accuracy([0, 1, 2], [0, 1, 2]) == 1.0

    def test_hand_count(self):
        assert micro_accuracy([A, A, A, B], [A, A, A, A]) == 0.75

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            micro_accuracy([], [])


class TestMacro:
    def test_hand_count(self):
        assert macro_accuracy([A, A, A, B], [A, A, A, A]) == 0.5

    def test_all_correct(self):
        assert macro_accuracy([2, 0, 1, 1], [2, 0, 1, 1]) == 1.0

    def test_single_class_reduces_to_recall(self):
        assert macro_accuracy([1, 1, 1, 1], [1, 0, 1, 1], num_classes=3) == 0.75

    def test_absent_classes_excluded(self):
        assert macro_accuracy([0, 0, 1], [0, 0, 2], num_classes=5) == 0.5

    def test_balanced_equals_micro(self):
        rng = np.random.default_rng(0)
        truth = np.repeat(np.arange(4), 25)
        pred = rng.integers(0, 4, 100)
        assert macro_accuracy(truth, pred, 4) == pytest.approx(micro_accuracy(truth, pred))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            macro_accuracy([0, 1], [0])

    def test_confusion(self):
        np.testing.assert_array_equal(confusion_counts([A, A, A, B], [A, A, A, A], 2), [[3, 0], [1, 0]])
