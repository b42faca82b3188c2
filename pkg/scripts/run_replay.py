"""Replay contribution rate: ground-truth scorer vs random scorer."""

from dataclasses import asdict

from _common import finish, parser

from rankkit import experiments as ex

p = parser(__doc__, 10)
p.add_argument("--sessions", type=int, default=5000)
args = p.parse_args()
out = []
for s in range(args.seeds):
    r = ex.replay_study(s, sessions=args.sessions)
    print(f"seed {s}: truth {r.truth_rate:.4f} ({r.truth_matched} matched)  "
          f"random {r.random_rate:.4f} ({r.random_matched} matched)")
    out.append(asdict(r))
print(f"truth wins on {sum(o['truth_rate'] > o['random_rate'] for o in out)}/{len(out)} seeds")
finish(args, out)
