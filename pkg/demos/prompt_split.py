"""Show how identifier-tagged prompts are split per character."""
from multipose.errors import MultiPoseError
from multipose.prompts import parse_prompt, split_prompt

EXAMPLES = [
    ("red<1>, blue<2>, on gray background", 2),
    ("a red<1> figure walking, blue<2>, in the park", 2),
    ("a figure walking in the park", 2),
    ("red<1>, blue<2>", 3),
    ("red<1> and blue<2>, on gray background", 2),
    ("red<3>, on gray background", 2),
]

for raw, n in EXAMPLES:
    print(f"{raw!r} with {n} pose track(s)")
    try:
        split = split_prompt(parse_prompt(raw), n)
    except MultiPoseError as exc:
        print(f"  {type(exc).__name__}: {exc}\n")
        continue
    for k in range(1, n + 1):
        print(f"  character {k}: {split[k]!r}")
    print(f"  full prompt: {split.full!r}\n")
