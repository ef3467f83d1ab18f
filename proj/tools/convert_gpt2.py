#!/usr/bin/env python3
"""Convert a Hugging Face GPT-2 checkpoint to the eapig weights manifest, and
build tokenized Greater-Than datasets.

    convert_gpt2.py weights --model gpt2 --out gpt2.json
    convert_gpt2.py greater-than --tokenizer gpt2 --n 1000 --out greater_than.jsonl

Both need `torch` and `transformers`; the model/tokenizer argument may be a
hub name or a local directory.
"""

import argparse
import json
import random
import sys
from pathlib import Path

import numpy as np


def _tensor(t):
    return np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))


def gpt2_tensors(model):
    """Returns (config dict, list of (name, float32 array)) in manifest order."""
    cfg = model.config
    if cfg.activation_function not in ("gelu_new", "gelu_pytorch_tanh"):
        print(f"warning: activation {cfg.activation_function} is evaluated as tanh-approximated GELU",
              file=sys.stderr)
    D, H = cfg.n_embd, cfg.n_head
    Dh = D // H
    M = cfg.n_inner or 4 * D
    config = {
        "n_layers": cfg.n_layer,
        "n_heads": H,
        "d_model": D,
        "d_head": Dh,
        "d_mlp": M,
        "vocab_size": cfg.vocab_size,
        "max_seq_len": cfg.n_positions,
        "ln_eps": cfg.layer_norm_epsilon,
        "activation": "gelu",
        "normalization": "layernorm",
    }
    sd = {k: _tensor(v) for k, v in model.state_dict().items()}
    p = "transformer."
    out = [
        ("embed.W_E", sd[p + "wte.weight"]),
        ("embed.W_pos", sd[p + "wpe.weight"]),
    ]
    for l in range(cfg.n_layer):
        h = f"{p}h.{l}."
        b = f"blocks.{l}."
        W_qkv = sd[h + "attn.c_attn.weight"]  # [D, 3D], applied as x @ W
        b_qkv = sd[h + "attn.c_attn.bias"]
        out += [(b + "ln1.w", sd[h + "ln_1.weight"]), (b + "ln1.b", sd[h + "ln_1.bias"])]
        for i, name in enumerate("QKV"):
            W = W_qkv[:, i * D:(i + 1) * D].reshape(D, H, Dh).transpose(1, 0, 2)
            out.append((b + f"attn.W_{name}", W))
        for i, name in enumerate("QKV"):
            out.append((b + f"attn.b_{name}", b_qkv[i * D:(i + 1) * D].reshape(H, Dh)))
        out.append((b + "attn.W_O", sd[h + "attn.c_proj.weight"].reshape(H, Dh, D)))
        # The output bias is shared across heads; each head carries an equal share.
        out.append((b + "attn.b_O", np.tile(sd[h + "attn.c_proj.bias"] / H, (H, 1))))
        out += [
            (b + "ln2.w", sd[h + "ln_2.weight"]),
            (b + "ln2.b", sd[h + "ln_2.bias"]),
            (b + "mlp.W_in", sd[h + "mlp.c_fc.weight"]),
            (b + "mlp.b_in", sd[h + "mlp.c_fc.bias"]),
            (b + "mlp.W_out", sd[h + "mlp.c_proj.weight"]),
            (b + "mlp.b_out", sd[h + "mlp.c_proj.bias"]),
        ]
    out += [
        ("ln_final.w", sd[p + "ln_f.weight"]),
        ("ln_final.b", sd[p + "ln_f.bias"]),
        ("unembed.W_U", np.ascontiguousarray(sd["lm_head.weight"].T)),
        ("unembed.b_U", np.zeros(cfg.vocab_size, dtype="<f4")),
    ]
    return config, out


def write_manifest(path, config, tensors):
    path = Path(path)
    blob = path.with_suffix(".bin")
    entries = []
    offset = 0
    with open(blob, "wb") as f:
        for name, arr in tensors:
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            f.write(data)
            entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape),
                            "byte_offset": offset, "byte_length": len(data)})
            offset += len(data)
    path.write_text(json.dumps({"config": config, "blob": blob.name, "tensors": entries}, indent=1) + "\n")


NOUNS = ["abduction", "accord", "affair", "agreement", "appraisal", "assaults", "assessment", "attack",
         "attempts", "campaign", "captivity", "case", "challenge", "chaos", "clash", "collaboration",
         "coma", "competition", "confrontation", "consequence", "conspiracy", "construction",
         "consultation", "contact", "contract", "convention", "cooperation", "custody", "deal",
         "decline", "decrease", "demonstrations", "development", "disagreement", "disorder",
         "dispute", "domination", "dynasty", "effect", "effort", "employment", "endeavor",
         "engagement", "epidemic", "evaluation", "exchange", "existence", "expansion", "expedition",
         "experiments", "fall", "fame", "flights", "friendship", "growth", "hardship", "hostility",
         "illness", "impact", "imprisonment", "improvement", "incarceration", "increase",
         "insurgency", "invasion", "investigation", "journey", "kingdom", "marriage", "modernization",
         "negotiation", "notoriety", "obstruction", "operation", "order", "outbreak", "outcome",
         "overhaul", "patrols", "pilgrimage", "plague", "plan", "practice", "process", "program",
         "progress", "project", "pursuit", "quest", "raids", "reforms", "reign", "relationship",
         "retaliation", "riot", "rise", "rivalry", "romance", "rule", "sanctions", "shift", "siege",
         "slump", "stature", "stint", "strikes", "study", "test", "testing", "tests", "therapy",
         "tour", "tradition", "treaty", "trial", "trip", "unemployment", "voyage", "warfare", "work"]


def greater_than(tokenizer, n, seed):
    """Clean prompts 'The N lasted from the year XXYY to the year XX' with
    answers YY+1..99 and wrongs 00..YY; corrupted prompts use XX01."""
    rng = random.Random(seed)
    two_digit = {}
    for y in range(100):
        ids = tokenizer.encode(f"{y:02d}")
        if len(ids) == 1:
            two_digit[y] = ids[0]
    if len(two_digit) != 100:
        raise SystemExit("tokenizer does not encode every two-digit year as a single token")
    examples = []
    attempts = 0
    while len(examples) < n:
        attempts += 1
        if attempts > 100 * n:
            raise SystemExit("could not build enough token-length matched examples")
        noun = rng.choice(NOUNS)
        century = rng.randint(11, 17)
        yy = rng.randint(2, 98)
        clean = tokenizer.encode(f"The {noun} lasted from the year {century}{yy:02d} to the year {century}")
        corrupt = tokenizer.encode(f"The {noun} lasted from the year {century}01 to the year {century}")
        if len(clean) != len(corrupt):
            continue
        examples.append({
            "clean": clean,
            "corrupted": corrupt,
            "answers": [two_digit[y] for y in range(yy + 1, 100)],
            "wrongs": [two_digit[y] for y in range(0, yy + 1)],
            "eval_position": len(clean) - 1,
        })
    return examples


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="cmd", required=True)
    w = sub.add_parser("weights", help="convert a GPT-2 checkpoint")
    w.add_argument("--model", default="gpt2")
    w.add_argument("--out", required=True)
    g = sub.add_parser("greater-than", help="write a tokenized Greater-Than dataset")
    g.add_argument("--tokenizer", default="gpt2")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    args = ap.parse_args(argv)

    if args.cmd == "weights":
        from transformers import GPT2LMHeadModel

        model = GPT2LMHeadModel.from_pretrained(args.model)
        config, tensors = gpt2_tensors(model)
        write_manifest(args.out, config, tensors)
    else:
        from transformers import AutoTokenizer

        tok = AutoTokenizer.from_pretrained(args.tokenizer)
        with open(args.out, "w") as f:
            for ex in greater_than(tok, args.n, args.seed):
                f.write(json.dumps(ex) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
