"""Two-parameter quadratic toy: diagonal vs full Fisher penalty as the task-A curvature correlation grows."""

from kfcl import report


def main():
    for corr in (0.0, 0.5, 0.9, 0.99):
        rows = report.toy_2param_demo(correlation=corr, lam=1.0)
        print(f"correlation {corr}")
        print(report.toy_table(rows))
        print()


if __name__ == "__main__":
    main()
