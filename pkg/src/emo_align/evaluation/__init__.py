"""Generative SER, behaviour agreement and the judge harness."""

from .judge import (
    JudgeBackendConfig,
    JudgeBackendError,
    JudgeParseError,
    JudgeVerdict,
    OfflineHeuristicJudge,
    RemoteChatJudge,
    empathy_rubric,
    judge_score,
    judge_winrate,
    make_backend,
    parse_choice,
    parse_score,
    quality_rubric,
    render_judge_prompt,
)
from .ser import (
    AgreementReport,
    SerReport,
    continuation_ce,
    eval_agreement,
    eval_ser,
    generate_from_speech,
    parse_emotion_label,
    ser_report,
)
from .suites import history_for, respond, response_suite, winrate_suite, write_report

__all__ = [name for name in dir() if not name.startswith("_")]
