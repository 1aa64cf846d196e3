"""Train and evaluate the damped momentum regressor."""

import argparse

from config import Config
from data import make_dataset
from evaluate import test_error
from model import LinearModel
from optim import DampedMomentum
from train import train


def parse_args(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--epochs", type=int, default=Config.epochs)
    p.add_argument("--batch-size", type=int, default=Config.batch_size)
    return p.parse_args(argv)


def main(argv=None) -> float:
    args = parse_args(argv)
    cfg = Config(epochs=args.epochs, batch_size=args.batch_size)
    (X_tr, y_tr), (X_te, y_te) = make_dataset(cfg)
    model = LinearModel(cfg.dim)
    opt = DampedMomentum(cfg.dim, cfg.learning_rate, cfg.momentum, cfg.damping)
    losses = train(model, opt, X_tr, y_tr, cfg)
    err = test_error(model, X_te, y_te)
    print(f"epochs {cfg.epochs} final train loss {losses[-1]:.4f}")
    print(f"test error {err:.4f}")
    return err


if __name__ == "__main__":
    main()
