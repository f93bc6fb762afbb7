"""Smoke test for the Python extension.

Build and run from the repository root:

    cargo build --release -p deferbench-python
    cp target/release/libdeferbench_py.so python/deferbench.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import deferbench as db  # noqa: E402


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok: {msg}")


def main():
    zeros = [0.0, 0.0, 0.0]
    check(abs(db.loss_one_stage(zeros, 0, 0.5) - 0.7520) < 1e-4, "one-stage loss at zero logits")
    check(abs(db.loss_two_stage(zeros, 0, 1.0) - 2 * math.log(3)) < 1e-9, "two-stage loss at zero logits")
    row = [0.3, -1.2, 0.8]
    check(abs(db.loss_one_stage(row, 1, 1.0) - db.loss_cross_entropy(row, 1)) < 1e-12, "alpha=1 is cross-entropy")
    g = db.grad_cross_entropy(row, 0)
    check(abs(sum(g)) < 1e-12, "cross-entropy gradient sums to zero")
    check(db.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75, "auc")
    check(db.balanced_accuracy(1, 0, 2, 1) == 0.75, "balanced accuracy")
    check(db.softmax_uncertainty(0.5) == 1.0, "softmax uncertainty peaks at 0.5")

    data = db.generate(n_samples=2000, positive_fraction=0.1, seed=1, blobs_dim=6).split(1)
    check(len(data) == 2000 and data.positives == 200, "generated dataset")
    train = data.subset("train")
    test = data.subset("test")

    net = db.Network(6, [16], 2, seed=3)
    trained, losses = db.train(net, train.features, train.labels, epochs=5, seed=3)
    check(losses[-1] < losses[0], "training lowers the loss")
    probs = trained.positive_probability(test.features)
    check(db.auc(probs, test.labels) > 0.7, "trained network ranks positives")

    settings = "hidden_dims = [16]\nn_samples = 4\n[sgd]\nepochs = 5\n"
    model = db.train_model("ensemble", data, seed=2, settings=settings)
    curve = db.uq_sweep(model, test, 50)
    rates = [p.deferral_rate for p in curve]
    check(all(b >= a for a, b in zip(rates, rates[1:])), "deferral rate is monotone")
    check(curve[-1].deferral_rate == 1.0 and curve[-1].bacc is None, "full deferral has no bAcc")
    decisions = model.predict(test.features, threshold=0.01)
    check(set(decisions) <= {-1, 0, 1}, "decisions are classes or -1")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model")
        model.save(path)
        again = db.DeferralModel.load(path)
        check(again.scores(test.features) == model.scores(test.features), "bundle round trip")
        data.save(os.path.join(d, "data.dfd"))
        check(db.Dataset.load(os.path.join(d, "data.dfd")).labels == data.labels, "dataset round trip")

    print("smoke test passed")


if __name__ == "__main__":
    main()
