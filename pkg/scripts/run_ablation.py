"""Cumulative variant ablation on the synthetic click benchmark."""

from _common import finish, parser

from rankkit import experiments as ex

p = parser(__doc__, 5)
p.add_argument("--variants", default="mlp-baseline,+ids,+residual-dcn,+isotonic")
p.add_argument("--train-rows", type=int, default=60_000)
p.add_argument("--test-rows", type=int, default=20_000)
args = p.parse_args()

rows = ex.run_ablation(args.variants, seeds=range(args.seeds), n_train=args.train_rows, n_test=args.test_rows)
print(ex.ablation_table_markdown(rows), end="")
for r in rows[1:]:
    print(f"{r.variant}: step delta significant at 2 sd: {r.step_significant()}")
finish(args, [r.as_dict() for r in rows])
