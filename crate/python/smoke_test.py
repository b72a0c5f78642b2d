"""Smoke test for the valpat_py extension.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import math
import os
import tempfile

import valpat_py as vp


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    # Loss values with closed forms.
    q = [[1.0, 0.0]]
    k = [[0.0, 1.0]]
    negs = [[0.0, 1.0], [0.0, -1.0], [0.0, 1.0]]
    assert close(vp.ssl_contrastive_loss(q, k, negs, 0.07), math.log(4))
    e = [[1.0, 0.0, 0.0]]
    n = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    i2t, t2i = vp.itc_loss(e, e, e, e, n, n, 1.0)
    assert close(i2t, -math.log(math.e / (math.e + 2))) and close(i2t, t2i)
    half = [[0.5]]
    assert close(vp.mac_hard_loss(half, half, [[1.0]], [1.0]), 2 * math.log(2))
    b = vp.total_loss(2.0, 1.0, 1.0, 4.0, 2.0)
    assert close(b["total"], 2.0 + 0.5 * 2.0 + 0.01 * (0.8 * 4.0 + 0.2 * 2.0), 1e-12)
    assert vp.total_loss(2.0, 1.0, 1.0, 4.0, 2.0, itc=False)["l_i2t"] == 0.0

    # Queue keeps the newest rows, oldest first.
    queue = vp.NegativeQueue(3, 2)
    for i in range(4):
        queue.enqueue([[math.cos(i), math.sin(i)]])
    assert len(queue) == 3 and close(queue.snapshot()[0][0], math.cos(1))

    # Metrics on a perfect-retrieval fixture.
    eye = [[1.0 if i == j else 0.0 for j in range(4)] for i in range(4)]
    s = vp.EmbeddingSet(eye, [0, 1, 2, 3])
    m_ap, cmc = vp.cmc_map(s, s, 3)
    assert m_ap == 1.0 and cmc == [1.0, 1.0, 1.0]
    assert vp.topk_text_search(s, s, [1, 2]) == [1.0, 1.0]
    rep = vp.attribute_metrics([[0.9, 0.8, 0.1, 0.2]], [[1.0, 0.0, 0.0, 1.0]])
    assert close(rep["accuracy"], 1 / 3) and close(rep["f1"], 0.5)

    # Mining.
    corpus = ["a man in a red shirt", "a woman in a blue shirt", "a man with a bag"]
    vocab = vp.build_vocabulary(corpus, 3)
    assert [t for t, _, _, _ in vocab][:2] == ["man", "shirt"]
    assert sum(vp.label_sample("a man in a red shirt", corpus, 3)) == 2

    # A few training steps on the synthetic cards, then a checkpoint round trip.
    cfg = vp.TrainConfig.desk()
    cfg.epochs = 4
    trainer = vp.Trainer(cfg)
    recs = trainer.train(until_step=2)
    assert [r["step"] for r in recs] == [0, 1] and all(math.isfinite(r["total"]) for r in recs)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ckpt.bin")
        trainer.save_checkpoint(path)
        resumed = vp.Trainer.from_checkpoint(path)
        a = trainer.train()
        b = resumed.train()
        assert a == b, "resumed run diverged"
        emb = trainer.embed("text")
        assert len(emb) == 32 and emb.dim == 128
        assert vp.cli(["inspect-checkpoint", "--checkpoint", path]) == 0
    assert vp.cli(["no-such-command"]) == 2

    try:
        vp.ssl_contrastive_loss([[0.5, 0.0]], k, negs, 0.1)
    except vp.ValpatError as exc:
        assert "invalid_input" in str(exc)
    else:
        raise AssertionError("non-unit query accepted")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
