"""Cumulative regret of thompson, greedy and random on the two-arm Gaussian bandit."""

from _common import finish, parser

from rankkit import experiments as ex

p = parser(__doc__, 20)
p.add_argument("--rounds", type=int, default=2000)
args = p.parse_args()
curves = ex.regret_curves(range(args.seeds), args.rounds)
for pol, c in curves.items():
    m = c.mean(axis=0)
    marks = [r for r in (100, 500, 1000, args.rounds) if r <= args.rounds]
    print(f"{pol:>9}: " + "  ".join(f"@{r} {m[r - 1]:.1f}" for r in marks))
finish(args, {pol: c.mean(axis=0).tolist() for pol, c in curves.items()})
