import os

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vlur.classifier import (
    EMBED_DIM,
    SceneClassifier,
    StubBackend,
    build_prompts,
    classify,
    encode_prompts,
    finetune_classifier,
    make_backend,
    similarity_probs,
)
from vlur.data import DatasetManifest, ManifestEntry, write_image
from vlur.errors import BackendError, ClassificationError, DataError
from vlur.types import ALL_TYPES, DegradationType


def test_prompts():
    p = build_prompts()
    assert len(p) == 11
    assert p[0] == "The image has haze degradation"
    assert p[1] == "The image has low light degradation"
    assert p[10] == "The image has haze + low + snow degradation"


def test_prompt_matrix_unit_rows_and_cached(stub_classifier):
    m = stub_classifier.text_matrix()
    assert m.shape == (11, EMBED_DIM)
    np.testing.assert_allclose(m.norm(dim=1).numpy(), 1.0, atol=1e-12)
    assert stub_classifier.text_matrix() is m
    assert len({tuple(r) for r in m.numpy().round(6)}) == 11


def test_text_feature_for_type(stub_classifier):
    y = stub_classifier.text_feature_for_type(DegradationType.HAZE)
    np.testing.assert_array_equal(y, encode_prompts(stub_classifier.backend)[0].numpy().astype(np.float32))
    assert abs(np.linalg.norm(y) - 1) < 1e-6
    np.testing.assert_array_equal(y, stub_classifier.text_feature_for_type("haze"))


def test_self_similarity_wins():
    q, _ = torch.linalg.qr(torch.randn(EMBED_DIM, 11, dtype=torch.float64))
    text = q.T  # orthonormal rows
    for k in range(11):
        probs = similarity_probs(text[k], text)
        assert int(probs.argmax()) == k


def test_equal_similarities_tie_break_to_first():
    text = torch.zeros(11, EMBED_DIM, dtype=torch.float64)
    text[:, 0] = 1.0  # eleven identical rows
    img = torch.zeros(EMBED_DIM, dtype=torch.float64)
    img[0] = 1.0

    class Fixed:
        identifier = "fixed"

        def encode_image(self, images):
            return img.unsqueeze(0).repeat(len(images), 1)

    dtype, probs = classify(Fixed(), text, np.zeros((8, 8, 3)))
    np.testing.assert_allclose(probs, 1 / 11, atol=1e-12)
    assert dtype is DegradationType.HAZE


def test_probs_match_direct_softmax(rng):
    # independent evaluation over the 11 outcomes in plain Python
    for _ in range(20):
        text = rng.normal(size=(11, EMBED_DIM))
        img = rng.normal(size=EMBED_DIM)
        got = similarity_probs(torch.tensor(img), torch.tensor(text), 100.0)[0].numpy()
        sims = [float(img @ t) / (np.sqrt(img @ img) * np.sqrt(t @ t)) for t in text]
        m = max(sims)
        ex = [np.exp(100.0 * (s - m)) for s in sims]
        np.testing.assert_allclose(got, [e / sum(ex) for e in ex], rtol=1e-12, atol=1e-15)


def test_zero_norm_rejected():
    with pytest.raises(ClassificationError):
        similarity_probs(torch.zeros(EMBED_DIM), torch.randn(11, EMBED_DIM))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.1, 50.0))
def test_softmax_rows_and_argmax_invariance(seed, scale):
    g = torch.Generator().manual_seed(seed)
    img = torch.randn(4, EMBED_DIM, generator=g, dtype=torch.float64)
    text = torch.randn(11, EMBED_DIM, generator=g, dtype=torch.float64)
    p = similarity_probs(img, text, 100.0)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(1).numpy(), 1.0, atol=1e-6)
    # positive rescaling of the logits (temperature) keeps the winner
    assert torch.equal(p.argmax(1), similarity_probs(img, text, 100.0 * scale).argmax(1))
    # a shared additive constant is a no-op for softmax
    logits = 100.0 * torch.nn.functional.normalize(img, dim=1) @ torch.nn.functional.normalize(text, dim=1).T
    torch.testing.assert_close(torch.softmax(logits + 3.7, 1), p)


def test_stub_backend_deterministic_and_shaped(rng):
    imgs = torch.from_numpy(rng.random((3, 3, 40, 48)).astype(np.float32))
    a = StubBackend(0).encode_image(imgs)
    b = StubBackend(0).encode_image(imgs)
    assert a.shape == (3, EMBED_DIM)
    torch.testing.assert_close(a, b, rtol=0, atol=0)
    assert not torch.equal(StubBackend(1).encode_image(imgs), a)
    assert torch.isfinite(a).all()
    assert StubBackend(0).encode_text(build_prompts()).shape == (11, EMBED_DIM)


def test_backend_failure_carries_identifier():
    class Broken:
        identifier = "broken-v0"

        def encode_text(self, prompts):
            raise RuntimeError("boom")

    with pytest.raises(BackendError, match="broken-v0"):
        encode_prompts(Broken())


def test_make_backend_unknown():
    with pytest.raises(Exception):
        make_backend("nope")


def test_zero_epochs_keeps_identity_adapter(tiny_dataset):
    clf = SceneClassifier(StubBackend(0))
    before = clf.checksum()
    report = finetune_classifier(clf, tiny_dataset, epochs=0)
    assert clf.checksum() == before
    torch.testing.assert_close(clf.adapter.weight, torch.eye(EMBED_DIM, dtype=torch.float64))
    assert clf.frozen and report["final_loss"] is None


def test_empty_manifest_rejected():
    with pytest.raises(DataError):
        finetune_classifier(SceneClassifier(StubBackend(0)), DatasetManifest(".", "train", []))


class SignPatternBackend:
    """Toy backend: the class id is written in pixel (0, 0); its embedding is a sign pattern over
    11 fixed orthonormal directions plus pixel-driven jitter."""

    identifier = "toy-sign-pattern"

    def __init__(self):
        g = torch.Generator().manual_seed(3)
        q, _ = torch.linalg.qr(torch.randn(EMBED_DIM, 11, generator=g, dtype=torch.float64))
        self.dirs = q.T
        signs = torch.ones(11, 11, dtype=torch.float64)
        signs[torch.triu(torch.ones(11, 11, dtype=torch.bool), diagonal=1)] = -1.0
        self.signs = signs
        self.jitter = torch.randn(EMBED_DIM, generator=g, dtype=torch.float64)
        self.text = torch.randn(11, EMBED_DIM, generator=g, dtype=torch.float64)

    def encode_text(self, prompts):
        return self.text[: len(prompts)]

    def encode_image(self, images):
        k = torch.round(images[:, 0, 0, 0].double() * 255 / 20).long()
        noise = images[:, 1].double().mean(dim=(1, 2)) - 0.5
        return self.signs[k] @ self.dirs + 0.3 * noise[:, None] * self.jitter


def test_separable_toy_set_reaches_full_train_accuracy(tmp_path, rng):
    entries = []
    for t in ALL_TYPES:
        for i in range(6):
            img = rng.random((8, 8, 3))
            img[0, 0, 0] = 20 * t.index / 255
            rel = f"{t.value}/{i}.png"
            write_image(tmp_path / rel, img)
            entries.append(ManifestEntry(rel, rel, t))
    manifest = DatasetManifest(str(tmp_path), "train", entries)
    clf = SceneClassifier(SignPatternBackend())
    report = finetune_classifier(clf, manifest, epochs=300, lr=1e-2)
    assert report["train_accuracy"] == 1.0


def test_frozen_classifier_refuses_finetune(tiny_dataset, stub_classifier):
    with pytest.raises(ClassificationError):
        finetune_classifier(stub_classifier, tiny_dataset, epochs=1)


def test_adapter_state_roundtrip():
    a = SceneClassifier(StubBackend(0))
    with torch.no_grad():
        a.adapter.weight.add_(torch.randn(EMBED_DIM, EMBED_DIM, dtype=torch.float64) * 0.01)
    a.freeze()
    b = SceneClassifier(StubBackend(0))
    b.load_adapter_state({k: v.astype(np.float32) for k, v in a.adapter_state().items()})
    b.freeze()
    assert a.checksum() == b.checksum()


def test_classify_image_probs_sum_to_one(stub_classifier, rng):
    t, p = stub_classifier.classify(rng.random((32, 32, 3)))
    assert t in ALL_TYPES
    assert abs(p.sum() - 1) < 1e-6


@pytest.mark.skipif(os.environ.get("VLUR_TEST_PRETRAINED") != "1",
                    reason="set VLUR_TEST_PRETRAINED=1 with CLIP weights in VLUR_CACHE")
def test_pretrained_backend_contract(rng):
    clf = SceneClassifier(make_backend("pretrained"))
    m = clf.text_matrix()
    assert m.shape == (11, EMBED_DIM)
    _, p = clf.classify(rng.random((64, 64, 3)))
    assert abs(p.sum() - 1) < 1e-6
