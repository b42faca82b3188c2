"""One cold window plus six Fisher-regularized increments on a drifting world."""

from dataclasses import asdict

from _common import finish, parser

from rankkit import experiments as ex
from rankkit.training import IncrementalConfig

p = parser(__doc__, 5)
p.add_argument("--forgetting-factor", type=float, default=1.0)
p.add_argument("--cold-weight", type=float, default=0.2)
args = p.parse_args()

inc = IncrementalConfig(forgetting_factor=args.forgetting_factor, cold_weight=args.cold_weight)
out = []
for s in range(args.seeds):
    r = ex.incremental_protocol(s, inc=inc)
    print(
        f"seed {s}: cold {r.cold_auc:.4f}  incremental mean {r.mean_incremental_auc:.4f}  "
        f"pooled retrain {r.retrain_auc:.4f}  steps {r.increment_steps}/{r.cold_steps}  pass={r.passed}"
    )
    out.append({**asdict(r), "passed": r.passed})
print(f"{sum(o['passed'] for o in out)}/{len(out)} seeds pass")
finish(args, out)
