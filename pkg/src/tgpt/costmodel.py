"""Analytical model of text-encoder activation memory during training.

The quantity tracked is the number of intermediate values the text encoder
must retain for backprop, which is proportional to how many prompt
sequences it processes per step:

    tgpt   -> 2 * batch_size   (two prompts per image)
    coop   -> N                (one learnable prompt per class, shared
                                across the batch)
    cocoop -> N * batch_size   (instance-conditional class prompts)

Per sequence and per block the retained elements are the attention maps
(heads * L^2) plus the linear/FFN activations (12 * L * d: QKV projections
3Ld, attention output Ld, FFN hidden 4Ld, FFN activation 4Ld), summed over
depth.  Everything is integer arithmetic, so the scaling claims
(constant-in-N, linear-in-N, factor-bs) are exact, not approximate.
Absolute bytes on a real device are out of scope; the curve shape is the
claim.
"""

from dataclasses import dataclass

PARADIGMS = ("tgpt", "coop", "cocoop")

CSV_HEADER = "paradigm,N,bs,sequences,activation_elements"


@dataclass
class CostInputs:
    n: int          # class count N
    bs: int         # batch size
    length: int     # prompt/sequence length L
    d: int          # width
    depth: int
    heads: int
    paradigm: str

    def __post_init__(self):
        for name in ("n", "bs", "length", "d", "depth", "heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}")


@dataclass
class CostReport:
    sequences: int
    activation_elements: int
    breakdown: dict


def sequences_for(paradigm: str, n: int, bs: int) -> int:
    if paradigm == "tgpt":
        return 2 * bs
    if paradigm == "coop":
        return n
    if paradigm == "cocoop":
        return n * bs
    raise ValueError(f"unknown paradigm {paradigm!r}")


def activation_elements(inputs: CostInputs) -> CostReport:
    seqs = sequences_for(inputs.paradigm, inputs.n, inputs.bs)
    length, d = inputs.length, inputs.d
    per_block = {
        "attention_maps": inputs.heads * length * length,
        "qkv": 3 * length * d,
        "attn_out": length * d,
        "ffn_hidden": 4 * length * d,
        "ffn_act": 4 * length * d,
    }
    factor = seqs * inputs.depth
    breakdown = {kind: factor * count for kind, count in per_block.items()}
    return CostReport(
        sequences=seqs,
        activation_elements=sum(breakdown.values()),
        breakdown=breakdown,
    )


def scaling_table(n_list, bs_list, length: int, d: int, depth: int, heads: int):
    """Cross-product rows for all paradigms plus monotonicity flags.

    Returns (rows, flags): rows are dicts matching CSV_HEADER; flags map
    (paradigm, bs) -> 'constant' or 'increasing' across the sorted N axis.
    """
    if not n_list or not bs_list:
        raise ValueError("scaling table needs nonempty N and batch-size lists")
    rows = []
    for paradigm in PARADIGMS:
        for n in n_list:
            for bs in bs_list:
                report = activation_elements(
                    CostInputs(n=n, bs=bs, length=length, d=d, depth=depth,
                               heads=heads, paradigm=paradigm)
                )
                rows.append({
                    "paradigm": paradigm, "N": n, "bs": bs,
                    "sequences": report.sequences,
                    "activation_elements": report.activation_elements,
                })
    flags = {}
    for paradigm in PARADIGMS:
        for bs in bs_list:
            totals = [r["activation_elements"] for r in rows
                      if r["paradigm"] == paradigm and r["bs"] == bs]
            ordered = [t for _, t in sorted(zip(n_list, totals))]
            if all(t == ordered[0] for t in ordered):
                flags[(paradigm, bs)] = "constant"
            elif all(a < b for a, b in zip(ordered, ordered[1:])):
                flags[(paradigm, bs)] = "increasing"
            else:
                flags[(paradigm, bs)] = "mixed"
    return rows, flags


def write_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(f"{r['paradigm']},{r['N']},{r['bs']},{r['sequences']},"
                     f"{r['activation_elements']}\n")
