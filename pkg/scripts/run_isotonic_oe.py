"""Held-out O/E before and after joint training with the isotonic head."""

from dataclasses import asdict

from _common import finish, parser

from rankkit import experiments as ex

args = parser(__doc__, 5).parse_args()
out = []
for s in range(args.seeds):
    r = ex.isotonic_oe_study(s)
    print(f"seed {s}: O/E {r.initial:.4f} -> {r.final:.4f}   AUC {r.initial_auc:.4f} -> {r.final_auc:.4f}")
    out.append(asdict(r))
finish(args, out)
