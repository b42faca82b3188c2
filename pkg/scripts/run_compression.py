"""QR-hashed vs uncompressed id tables, then int8 quantization of the QR model."""

from dataclasses import asdict

import numpy as np
from _common import finish, parser

from rankkit import experiments as ex

args = parser(__doc__, 3).parse_args()
out = []
for s in range(args.seeds):
    r = ex.compression_study(s)
    print(
        f"seed {s}: full {r.full_auc:.4f}  qr {r.qr_auc:.4f} ({r.compression:.1f}x, loss {r.qr_relative_loss:+.3%})  "
        f"int8 {r.quantized_auc:.4f} (change {r.quantized_relative_change:.2e})"
    )
    out.append({**asdict(r), "qr_relative_loss": r.qr_relative_loss,
                "quantized_relative_change": r.quantized_relative_change})
print(f"mean relative loss {np.mean([o['qr_relative_loss'] for o in out]):+.3%}")
finish(args, out)
