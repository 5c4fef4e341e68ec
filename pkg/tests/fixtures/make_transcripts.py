"""Regenerates the wire-transcript fixtures.

Each case lists the first-position top logprobs a server returned and, next to
it, the option logits extracted by hand: exact single-letter tokens after
whitespace stripping, the larger value on duplicates, and min(observed) - 10
for letters that never appear.

    python3 tests/fixtures/make_transcripts.py
"""

import json
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

from conftest import fixture_instance  # noqa: E402
from safepath.adapter import BackendConfig, LLMAdapter, request_key  # noqa: E402

CFG = BackendConfig("http://fixture.invalid/v1/chat/completions", "fixture-model")

# (name, n_options, top logprobs, hand-extracted logits)
CASES = [
    ("two_options", 2, [("A", -0.2), ("B", -1.8)], {"A": -0.2, "B": -1.8}),
    ("missing_c", 3, [("A", -0.5), ("B", -1.2)], {"A": -0.5, "B": -1.2, "C": -11.2}),
    ("leading_space", 4, [(" B", -0.1), (" A", -2.5), (" D", -3.0), (" C", -4.0)],
     {"A": -2.5, "B": -0.1, "C": -4.0, "D": -3.0}),
    ("duplicate_keeps_max", 3, [("A", -0.7), (" A", -0.4), ("B", -2.0), ("C", -3.0)],
     {"A": -0.4, "B": -2.0, "C": -3.0}),
    ("lowercase_ignored", 3, [("a", -0.1), ("B", -1.0), ("C", -2.0)],
     {"A": -12.0, "B": -1.0, "C": -2.0}),
    ("punctuated_ignored", 4, [("A.", -0.3), ("Answer", -1.0), ("B", -1.5), ("C", -2.5), ("D", -2.6)],
     {"A": -12.6, "B": -1.5, "C": -2.5, "D": -2.6}),
    ("five_all_present", 5, [("E", -0.05), ("A", -3.1), ("C", -4.2), ("B", -5.0), ("D", -6.3)],
     {"A": -3.1, "B": -5.0, "C": -4.2, "D": -6.3, "E": -0.05}),
    ("five_single_letter", 5, [("C", -0.01), ("The", -5.0)],
     {"A": -10.01, "B": -10.01, "C": -0.01, "D": -10.01, "E": -10.01}),
    ("noise_tokens", 4, [("The", -0.9), ("\n", -1.1), ("B", -1.3), ("D", -2.0), ("A", -2.2), ("C", -2.4)],
     {"A": -2.2, "B": -1.3, "C": -2.4, "D": -2.0}),
    ("out_of_range_letter", 5, [("F", -0.2), ("A", -1.0), ("B", -1.5), ("C", -2.0), ("D", -2.5), ("E", -3.0)],
     {"A": -1.0, "B": -1.5, "C": -2.0, "D": -2.5, "E": -3.0}),
    ("trailing_newline", 3, [("B\n", -0.3), ("A", -1.4), ("C", -2.9)],
     {"A": -1.4, "B": -0.3, "C": -2.9}),
    ("tied_logprobs", 4, [("A", -1.3862943611198906), ("B", -1.3862943611198906),
                          ("C", -1.3862943611198906), ("D", -1.3862943611198906)],
     {"A": -1.3862943611198906, "B": -1.3862943611198906, "C": -1.3862943611198906,
      "D": -1.3862943611198906}),
    ("very_negative", 3, [("A", -30.0), ("B", -31.5), ("C", -45.0)],
     {"A": -30.0, "B": -31.5, "C": -45.0}),
    ("certain_answer", 4, [("D", 0.0), ("A", -18.0)], {"A": -18.0, "B": -28.0, "C": -28.0, "D": 0.0}),
    ("two_missing", 4, [("B", -0.4), ("D", -1.1), ("Sure", -3.0)],
     {"A": -11.1, "B": -0.4, "C": -11.1, "D": -1.1}),
    ("unsorted_list", 3, [("C", -2.0), ("A", -0.25), ("B", -0.9)],
     {"A": -0.25, "B": -0.9, "C": -2.0}),
    ("markdown_ignored", 3, [("**A**", -0.2), ("B", -0.8), ("C", -1.9)],
     {"A": -11.9, "B": -0.8, "C": -1.9}),
    ("five_e_top", 5, [("E", -0.3), ("D", -1.6), ("C", -2.7), ("B", -3.8), ("A", -4.9)],
     {"A": -4.9, "B": -3.8, "C": -2.7, "D": -1.6, "E": -0.3}),
    ("only_b_of_two", 2, [("B", -0.02), ("I", -4.0)], {"A": -10.02, "B": -0.02}),
    ("tab_whitespace", 3, [("\tC", -0.6), (" B ", -0.9), ("A", -2.2)],
     {"A": -2.2, "B": -0.9, "C": -0.6}),
]


def response(top):
    first = top[0][0]
    return {
        "id": "chatcmpl-fixture",
        "object": "chat.completion",
        "model": CFG.model_name,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": first},
            "finish_reason": "length",
            "logprobs": {"content": [{
                "token": first,
                "logprob": top[0][1],
                "top_logprobs": [{"token": t, "logprob": lp} for t, lp in top],
            }]},
        }],
    }


def main():
    out = HERE / "transcripts"
    out.mkdir(exist_ok=True)
    adapter = LLMAdapter(CFG)
    for i, (name, n, top, expected) in enumerate(CASES, start=1):
        inst = fixture_instance(n, seed=i)
        assert inst.labels == sorted(expected)
        body = adapter.scoring_body(inst)
        doc = {
            "name": name,
            "n_options": n,
            "seed": i,
            "expected_logits": expected,
            "transcript": [{"key": request_key(body), "request": body, "status": 200,
                            "response": response(top)}],
        }
        (out / f"{i:02d}_{name}.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
