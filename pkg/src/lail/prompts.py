"""Prompt template: requirement/code shot blocks followed by the test requirement.

The rendered text carries no natural-language instructions; the trailing
`### Code:` header is the cue for the model to start generating. Rendering
and parsing are exact inverses as long as no requirement or code contains
the delimiter lines themselves.
"""

from __future__ import annotations

REQUIREMENT_HEADER = "### Requirement:\n"
CODE_HEADER = "\n### Code:\n"
SHOT_SEPARATOR = "\n\n"


class PromptParseError(ValueError):
    """Raised when text does not follow the prompt template."""


def render_prompt(shots: list[tuple[str, str]], test_requirement: str) -> str:
    """Render (requirement, code) shots plus the test requirement to prompt text."""
    parts = []
    for requirement, code in shots:
        parts.append(f"{REQUIREMENT_HEADER}{requirement}{CODE_HEADER}{code}{SHOT_SEPARATOR}")
    parts.append(f"{REQUIREMENT_HEADER}{test_requirement}{CODE_HEADER}")
    return "".join(parts)


def parse_prompt(text: str) -> tuple[list[tuple[str, str]], str]:
    """Recover (shots, test_requirement) from rendered prompt text.

    The final block must end with an empty code section (the generation cue).
    """
    if not text.startswith(REQUIREMENT_HEADER):
        raise PromptParseError("prompt does not start with the requirement header")
    blocks = text[len(REQUIREMENT_HEADER):].split(SHOT_SEPARATOR + REQUIREMENT_HEADER)
    shots: list[tuple[str, str]] = []
    for i, block in enumerate(blocks):
        if CODE_HEADER not in block:
            raise PromptParseError(f"block {i} lacks a code header")
        requirement, code = block.split(CODE_HEADER, 1)
        if i == len(blocks) - 1:
            if code != "":
                raise PromptParseError("prompt does not end at the generation cue")
            return shots, requirement
        shots.append((requirement, code))
    raise PromptParseError("empty prompt")  # unreachable: split yields >= 1 block


def last_requirement(text: str) -> str:
    """The test requirement of a rendered prompt (its final requirement block)."""
    _, test_requirement = parse_prompt(text)
    return test_requirement
