"""End-to-end smoke test for the tsfactor_py bindings.

Synthesizes a small dataset, trains both stages at toy scale, and exercises
tokenize/decode round-trips, checkpoint save/load, generation, forecasting,
and the metric suite. Finishes in about a minute on one core.

Run after `pip install -e . --no-build-isolation`:

    python smoke_test.py
"""

import json
import math
import tempfile
from pathlib import Path

import tsfactor_py as tsf


def check(name, ok, detail=""):
    status = "ok" if ok else "FAIL"
    print(f"{status:4s} {name} {detail}")
    if not ok:
        raise SystemExit(f"smoke test failed at: {name}")


def main():
    (train, train_labels), (test, _) = tsf.synth_windows(
        seed=11, channels=4, window_len=24, rank=2, n_windows=160,
        n_prototypes=4, noise_std=0.02, n_classes=0, train_frac=0.9,
    )
    check("synth_windows", len(train) == 144 and len(test) == 16
          and len(train[0]) == 24 and len(train[0][0]) == 4,
          f"train={len(train)} test={len(test)}")
    check("labels absent for n_classes=0", train_labels is None)

    vq_cfg = json.dumps({
        "num_channels": 4, "rank": 2, "codebook_size": 16,
        "encoder_hidden_dims": [16], "decoder_channels": 8,
    })
    training = json.dumps({
        "seed": 1, "grad_clip": 1.0,
        "stage1": {"lr": 2e-3, "epochs": 40, "batch_size": 32},
        "stage2": {"lr": 3e-3, "epochs": 12, "batch_size": 32},
    })
    vq = tsf.VqModel.train(train, config=vq_cfg, training=training)
    check("VqModel.train", vq.codebook_size == 16, repr(vq))

    rmse = vq.rmse(test)
    check("reconstruction rmse", rmse < 0.25, f"rmse={rmse:.4f}")

    tokens = vq.tokenize(train[0])
    check("tokenize", len(tokens) == 24 and all(t < 16 for t in tokens),
          f"first tokens={tokens[:6]}")
    decoded = vq.decode(tokens)
    check("decode shape", len(decoded) == 24 and len(decoded[0]) == 4)
    err = math.sqrt(sum((a - b) ** 2 for ra, rb in zip(decoded, train[0])
                        for a, b in zip(ra, rb)) / (24 * 4))
    check("tokenize/decode round trip", abs(err - vq.rmse([train[0]])) < 1e-9,
          f"window rmse={err:.4f}")

    sequences = [vq.tokenize(w) for w in train]
    ar = tsf.ArModel.train(sequences, config=json.dumps({
        "d_model": 24, "n_layers": 2, "n_heads": 2, "ffn_hidden": 48,
        "codebook_size": 16, "max_context": 64, "dropout": 0.0,
    }), training=training)
    nll = ar.nll(sequences)
    check("ArModel.train", nll < 2.5, f"train nll={nll:.3f}")

    sample = tsf.generate(vq, ar, length=24, temperature=1.0, seed=7)
    check("generate", len(sample) == 24 and len(sample[0]) == 4
          and all(math.isfinite(x) for row in sample for x in row))
    again = tsf.generate(vq, ar, length=24, temperature=1.0, seed=7)
    check("generate is deterministic per seed", sample == again)

    fc = tsf.forecast(vq, ar, observed=test[0][:12], horizon=12,
                      temperature=0.5, top_k=8, seed=3)
    check("forecast", len(fc) == 12 and len(fc[0]) == 4)

    with tempfile.TemporaryDirectory() as tmp:
        vq_path = Path(tmp) / "vq.ckpt"
        ar_path = Path(tmp) / "ar.ckpt"
        vq.save(vq_path)
        ar.save(ar_path)
        vq2 = tsf.VqModel.load(vq_path)
        ar2 = tsf.ArModel.load(ar_path)
        # Checkpoints store weights as f32, so reloaded scores agree to
        # single precision rather than bit-exactly.
        check("checkpoint round trip", vq2.tokenize(train[0]) == tokens
              and abs(ar2.nll(sequences) - nll) < 1e-3)
        try:
            tsf.VqModel.load(Path(tmp) / "absent.ckpt")
            check("missing checkpoint raises", False)
        except FileNotFoundError:
            check("missing checkpoint raises", True)

    gen = [tsf.generate(vq, ar, length=24, seed=100 + i) for i in range(len(test))]
    report = tsf.evaluate(test, gen, seed=5, repeats=2, embedding_dim=8,
                          max_steps=200)
    check("evaluate", set(report) == {"context_fid", "correlational",
                                      "discriminative", "predictive"}
          and all(math.isfinite(report[k]["mean"]) for k in report),
          " ".join(f"{k}={report[k]['mean']:.3f}" for k in sorted(report)))

    try:
        tsf.VqModel.train(train, config='{"rank": 99}', training=training)
        check("bad config raises ValueError", False)
    except ValueError:
        check("bad config raises ValueError", True)

    print("smoke test passed")


if __name__ == "__main__":
    main()
