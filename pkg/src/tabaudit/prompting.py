"""Chat transcript assembly for the row-completion probe.

The transcript is: one system instruction, one demonstration pair per
few-shot window, then the bare test prefix as the final user turn. Rows are
injected byte-identically to the file; the test target row is never
inserted anywhere, so a verbatim reproduction by the model cannot come from
this prompt (rows duplicated elsewhere in the file can still coincide with
the target, which is exactly the confound the audit measures separately).
"""

from __future__ import annotations

from dataclasses import dataclass

from .sampler import WindowSample

SYSTEM_MESSAGE = (
    "You are a helpful autocomplete bot for wearable sensor datasets. "
    "Your task is to provide rows as they are contained in sensor datasets. "
    "The user provides a number of contiguous rows from a sensor dataset. "
    "You then provide the next row from the dataset."
)

ROLE_MAPS = ("user_assistant", "user_system")


class EmptyPrefix(Exception):
    """A window with no prefix rows cannot form a prompt."""


@dataclass(frozen=True)
class ChatMessage:
    role: str  # system | user | assistant
    content: str


@dataclass(frozen=True)
class PromptTranscript:
    messages: list[ChatMessage]
    trial_id: int
    file_ref: str


def system_message() -> str:
    return SYSTEM_MESSAGE


def assemble_transcript(
    test: WindowSample,
    fewshot: list[WindowSample],
    role_map: str = "user_assistant",
    *,
    trial_id: int = 0,
    file_ref: str = "",
) -> PromptTranscript:
    """Build the ordered message list for one trial.

    ``role_map`` selects the role carrying few-shot answers: assistant
    turns (the conventional chat-API demonstration form, the default) or
    system turns.
    """
    if role_map not in ROLE_MAPS:
        raise ValueError(f"role_map must be one of {ROLE_MAPS}")
    if not test.prefix_rows or any(not w.prefix_rows for w in fewshot):
        raise EmptyPrefix("every window must have at least one prefix row")

    answer_role = "assistant" if role_map == "user_assistant" else "system"
    messages = [ChatMessage(role="system", content=SYSTEM_MESSAGE)]
    for example in fewshot:
        messages.append(ChatMessage(role="user", content="\n".join(example.prefix_rows)))
        messages.append(ChatMessage(role=answer_role, content=example.target_row))
    messages.append(ChatMessage(role="user", content="\n".join(test.prefix_rows)))
    return PromptTranscript(messages=messages, trial_id=trial_id, file_ref=file_ref)
