"""Scripted scenarios shipped with the package.

Each builder returns plain data plus ``Rule`` lists so the same scenario can
drive unit tests, ``cfpg selfcheck`` and the CLI (via ``dump_rules``).

Loop scenario, traced by hand (3 steps, extraction on, extractor says NONE):

    step 1  gate a=yes b=no   eligible [a]  resolved [a]  prefix 3 -> 5
    step 2  gate b=no         eligible []   resolved []   prefix 5 -> 7
    step 3  gate b=yes        eligible [b]  resolved [b]  prefix 7 -> 9
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from .backends import BackendSet, Rule, ScriptedBackend
from .core import Category, FTPTriple, NarrativeState
from .engine import EngineConfig
from .mining import DatasetRecord

YES = "ANSWER: yes\nCONFIDENCE: {c}\nRATIONALE: {why}"
NO = "ANSWER: no\nCONFIDENCE: {c}\nRATIONALE: {why}"


def yes(c: float = 0.9, why: str = "The text shows it.") -> str:
    return YES.format(c=c, why=why)


def no(c: float = 0.9, why: str = "The text does not show it.") -> str:
    return NO.format(c=c, why=why)


def dump_rules(rules: Sequence[Rule], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"rules": [r.to_dict() for r in rules]}, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


# --- Select-Generate-Update loop ------------------------------------------------

LOOP_OPENING = (
    "Sir Henry Baskerville arrives in London to claim the family estate. "
    "One of his new boots vanishes from the hotel without explanation. "
    "Holmes learns that Stapleton keeps a hound and needed an old boot for its scent."
)
BOOT = FTPTriple(
    id="boot",
    foreshadow="One of Sir Henry's boots goes missing without any immediate explanation.",
    trigger="The investigation reveals the existence of the hound and Stapleton's need for a scent-based tracking tool.",
    payoff="It is revealed that the boot was stolen to train the hound to hunt Sir Henry by his scent.",
    category=Category.OBJECT,
)
CANDLE = FTPTriple(
    id="candle",
    foreshadow="A candle is seen signalling from a window of Baskerville Hall at night.",
    trigger="Watson catches the butler at the window in the middle of the night.",
    payoff="Barrymore confesses that the candle signals food to his brother-in-law Selden, the escaped convict.",
    category=Category.EVENT,
)
SCENE_1 = "Holmes explains that the boot was stolen to train the hound to hunt Sir Henry. Watson shudders at the thought."
SCENE_2 = "That night Watson follows Barrymore to the window at the end of the corridor. A candle flickers against the dark glass."
SCENE_3 = "Barrymore confesses that the candle signals food to Selden, the escaped convict. Sir Henry promises to keep the secret."

LOOP_EXPECTED = [
    {"step": 1, "eligible": ["boot"], "resolved": ["boot"], "prefix": (3, 5)},
    {"step": 2, "eligible": [], "resolved": [], "prefix": (5, 7)},
    {"step": 3, "eligible": ["candle"], "resolved": ["candle"], "prefix": (7, 9)},
]


def loop_rules() -> dict[str, list[Rule]]:
    gate = "Task: trigger gate."
    realize = "Task: payoff realization."
    gen = "Task: continue story."
    return {
        "judge": [
            Rule((gate, f"Trigger condition: {BOOT.trigger}", "Stapleton keeps a hound"), yes(0.95, "Stapleton keeps a hound and needed a boot.")),
            Rule((gate, f"Trigger condition: {CANDLE.trigger}", "follows Barrymore to the window"), yes(0.9, "Watson followed Barrymore to the window.")),
            Rule((gate,), no(0.8, "The condition has not been narrated yet.")),
            Rule((realize, f"Required payoff: {BOOT.payoff}", SCENE_1), yes(0.9, "The passage states why the boot was stolen.")),
            Rule((realize, f"Required payoff: {CANDLE.payoff}", SCENE_3), yes(0.9, "Barrymore confesses.")),
            Rule((realize,), no(0.7, "The passage does not realize the payoff.")),
        ],
        "generator": [
            Rule((gen, f"1. {BOOT.payoff}"), SCENE_1),
            Rule((gen, f"1. {CANDLE.payoff}"), SCENE_3),
            Rule((gen,), SCENE_2, absent=("Narrative requirements",)),
        ],
        "extractor": [Rule(("Task: extract new setups.",), "NONE")],
    }


def loop_scenario() -> tuple[NarrativeState, BackendSet, EngineConfig, int]:
    rules = loop_rules()
    backends = BackendSet(
        generator=ScriptedBackend(responders=rules["generator"], name="loop-generator"),
        judge=ScriptedBackend(responders=rules["judge"], name="loop-judge"),
        extractor=ScriptedBackend(responders=rules["extractor"], name="loop-extractor"),
    )
    state = NarrativeState.from_text(LOOP_OPENING, [BOOT, CANDLE])
    return state, backends, EngineConfig(max_output_sentences=5), 3


# --- mining funnel -----------------------------------------------------------------

MINING_BOOK = "great-expectations"
MINING_SUMMARY = [
    "Miss Havisham lives alone in a decaying mansion with every clock stopped at twenty to nine.",
    "Pip receives a large fortune from an anonymous benefactor.",
    "A convict named Magwitch frightens Pip in the marshes and demands food and a file.",
    "Pip steals food from his sister's pantry for the convict.",
    "Pip moves to London and becomes a gentleman.",
    "Estella treats Pip with cold disdain.",
    "Pip assumes Miss Havisham is his secret benefactor.",
    "Magwitch returns and reveals that he is Pip's benefactor.",
    "Pip learns that Miss Havisham was jilted on her wedding day at twenty to nine.",
    "Estella is revealed to be the daughter of Magwitch.",
]
DESC_BENEFACTOR = "The anonymous fortune is explained when Magwitch reveals himself as the benefactor."
DESC_CLOCKS = "The stopped clocks are explained by the hour Miss Havisham was jilted."
DESC_THEMATIC = "Magwitch in the marshes loosely echoes the later family revelation."
DESC_DISDAIN = "Estella's disdain is recast by her parentage."


def _block(setup: str, payoff: str, desc: str, cat: str, trigger: str = "") -> str:
    lines = [f'SETUP: "{setup}"', f'PAYOFF: "{payoff}"']
    if trigger:
        lines.append(f"TRIGGER: {trigger}")
    lines += [f"DESCRIPTION: {desc}", f"CATEGORY: {cat}"]
    return "\n".join(lines)


S = MINING_SUMMARY
MINING_EXTRACTION = "\n---\n".join(
    [
        _block(S[1], S[7], DESC_BENEFACTOR, "event", "Magwitch returns to London."),
        # payoff quoted without its final period: fuzzy anchoring must map it to sentence 8
        _block(S[0], S[8][:-1], DESC_CLOCKS, "object", "Pip hears Miss Havisham's history."),
        _block(S[2], S[9], DESC_THEMATIC, "symbol"),
        _block("Pip dreams of sailing away to the sea.", S[4], "Unanchored setup.", "event"),
        _block(S[3], S[3], "Same sentence twice.", "event"),
        _block(S[5], S[9], DESC_DISDAIN, "speech-act"),
        _block(S[1], S[7], "Duplicate of the benefactor pair.", "event"),
    ]
)
MINING_EXPECTED = {"candidates": 4, "stage2": 3, "retained": 2, "dropped_stage1": 3}
MINING_EXPECTED_PAIRS = [(1, 7), (0, 8)]

RUBRIC_ALL_YES = "SETUP_VALID: yes\nPAYOFF_VALID: yes\nTEMPORAL_SEPARATION: yes\nHINDSIGHT_JUSTIFIED: yes\nCONFIDENCE: {c}"
RUBRIC_NO_TEMPORAL = "SETUP_VALID: yes\nPAYOFF_VALID: yes\nTEMPORAL_SEPARATION: no\nHINDSIGHT_JUSTIFIED: yes\nCONFIDENCE: 0.6"


def mining_rules() -> dict[str, list[Rule]]:
    align = "Task: payoff alignment verification."
    rubric = "Task: foreshadow rubric."
    return {
        "extractor": [Rule(("Task: candidate foreshadow-payoff pairs.",), MINING_EXTRACTION)],
        "judge": [
            Rule((align, f"Proposed link: {DESC_THEMATIC}"), no(0.7, "thematic echo")),
            Rule((align,), yes(0.9, "The later sentence resolves the setup.")),
        ],
        "verifier_a": [Rule((rubric,), RUBRIC_ALL_YES.format(c=0.96))],
        "verifier_b": [
            Rule((rubric, f"Proposed link: {DESC_DISDAIN}"), RUBRIC_NO_TEMPORAL),
            Rule((rubric,), RUBRIC_ALL_YES.format(c=0.84)),
        ],
    }


def mining_scenario() -> tuple[list[tuple[str, str]], BackendSet]:
    rules = mining_rules()
    backends = BackendSet(
        generator=ScriptedBackend(responders=rules["extractor"], name="mine-extractor"),
        judge=ScriptedBackend(responders=rules["judge"], name="mine-judge"),
        verifiers=(
            ScriptedBackend(responders=rules["verifier_a"], name="mine-verifier-a"),
            ScriptedBackend(responders=rules["verifier_b"], name="mine-verifier-b"),
        ),
    )
    return [(MINING_BOOK, " ".join(MINING_SUMMARY))], backends


# --- tracking corpus -------------------------------------------------------------------

HOUND = [
    "Sir Henry Baskerville arrives in London to claim the Baskerville estate.",
    "Shortly afterward, one of his new boots disappears from his hotel room.",
    "Holmes agrees to look into the matter but sends Watson to Devonshire.",
    "Watson meets the naturalist Stapleton and his sister on the moor.",
    "A second boot, an old one, goes missing from the hotel.",
    "Strange howls are heard across the moor at night.",
    "Watson discovers that the escaped convict Selden is hiding nearby.",
    "Selden is found dead, wearing clothes that once belonged to Sir Henry.",
    "Holmes reveals that a gigantic hound has been kept hidden on the moor.",
    "The investigation shows that Stapleton needed a scent-based tracking tool for the hound.",
    "It is revealed that the boot was stolen to train the hound to hunt Sir Henry by his scent.",
    "Stapleton flees into the Grimpen Mire and is never seen again.",
]
LIGHTHOUSE = [
    "Mrs. Ramsay promises her son James a trip to the lighthouse.",
    "Mr. Ramsay insists the weather will be too poor for the journey.",
    "The guests spend the evening at a long dinner.",
    "Lily Briscoe struggles to finish her painting of the house.",
    "Years pass and the house falls into disrepair.",
    "Mrs. Ramsay dies suddenly during the war years.",
    "The family returns to the house after a long absence.",
    "Mr. Ramsay finally sets out with James and Cam for the lighthouse.",
    "Lily completes her painting as the boat reaches the lighthouse.",
]
RING = [
    "Bilbo leaves his magic ring to Frodo before vanishing from the Shire.",
    "Gandalf warns Frodo to keep the ring secret and safe.",
    "Frodo leaves home with Sam at Gandalf's urging.",
    "Black riders pursue the hobbits across the countryside.",
    "At Rivendell the council decides the ring must be destroyed.",
    "The fellowship sets out for the south.",
    "Frodo and Sam continue alone toward Mordor.",
    "Gollum guides the hobbits through the marshes.",
    "Frodo is betrayed by Gollum at the spider's lair.",
    "Sam carries Frodo up the slopes of Mount Doom.",
    "The ring is destroyed in the fires of Mount Doom.",
]


def tracking_records() -> list[DatasetRecord]:
    return [
        DatasetRecord(
            "hound", tuple(HOUND), 1, 10,
            "The missing boot is explained as a scent source for training the hound.",
            Category.OBJECT,
            trigger="The investigation reveals the existence of the hound and Stapleton's need for a scent-based tracking tool.",
        ),
        DatasetRecord(
            "lighthouse", tuple(LIGHTHOUSE), 0, 7,
            "The promised trip to the lighthouse finally happens.",
            Category.SPEECH_ACT,
            trigger="The family returns to the house.",
        ),
        DatasetRecord(
            "ring", tuple(RING), 0, 10,
            "The ring Bilbo leaves behind is destroyed in Mount Doom.",
            Category.OBJECT,
            trigger="The hobbits reach Mount Doom.",
        ),
    ]


def tracking_rules() -> dict[str, list[Rule]]:
    """Detectors: CFPG fires on each record's payoff sentence; the plain prompt
    fires early on surface cues. The judge entails continuations that mention
    the payoff and is neutral otherwise."""
    fap = "Task: payoff detection."
    cfpg = "Task: codified payoff detection."
    gen = "Task: continue story"
    entail = "Task: narrative entailment."
    return {
        "generator": [
            # codified detector: fires exactly at the gold payoff sentence
            Rule((cfpg, HOUND[10]), yes(0.9, "The boot's purpose is revealed.")),
            Rule((cfpg, LIGHTHOUSE[7]), yes(0.85, "They set out for the lighthouse.")),
            Rule((cfpg, RING[9]), yes(0.8, "Sam carries Frodo up Mount Doom.")),
            Rule((cfpg,), no(0.8, "The payoff has not been narrated.")),
            # prompt-style detector: fires on surface cues
            Rule((fap, HOUND[4]), yes(0.7, "Another boot is missing; that must be it.")),
            Rule((fap, LIGHTHOUSE[7]), yes(0.6, "They leave for the lighthouse.")),
            Rule((fap,), no(0.6, "Not yet.")),
            # oracle-timing gate: the trigger sentence sits right before each payoff
            Rule(("Task: trigger gate.", HOUND[9]), yes(0.9, "Stapleton needed a scent source.")),
            Rule(("Task: trigger gate.", LIGHTHOUSE[6]), yes(0.8, "The family is back at the house.")),
            Rule(("Task: trigger gate.", RING[9]), yes(0.8, "They are on Mount Doom.")),
            Rule((gen, "Narrative requirements"), "The payoff of the foreshadowed setup is realized at last."),
            Rule((gen,), "The story moves on to another matter."),
            Rule(("Task: decision rationale.", "never decided"), "Too subtle; I waited for explicit confirmation."),
            Rule(("Task: decision rationale.",), "The intent or preparation seemed to be already enough."),
        ],
        "judge": [
            Rule((entail, "Generated continuation: The payoff of the foreshadowed setup"), "ANSWER: entails\nCONFIDENCE: 0.9\nRATIONALE: Same outcome."),
            Rule((entail,), "ANSWER: neutral\nCONFIDENCE: 0.6\nRATIONALE: Unrelated but compatible."),
            Rule(("Task: error classification.", "Too subtle"), "ANSWER: Conservative\nCONFIDENCE: 0.8\nRATIONALE: waited"),
            Rule(("Task: error classification.", "intent or preparation"), "ANSWER: Premature\nCONFIDENCE: 0.8\nRATIONALE: early"),
        ],
    }


def tracking_scenario() -> tuple[list[DatasetRecord], BackendSet]:
    rules = tracking_rules()
    backends = BackendSet(
        generator=ScriptedBackend(responders=rules["generator"], name="track-generator"),
        judge=ScriptedBackend(responders=rules["judge"], name="track-judge"),
    )
    return tracking_records(), backends


def write_cli_fixtures(directory: str | Path) -> dict[str, Path]:
    """Fixture files for running every CLI command in scripted mode."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mining = mining_rules()
    tracking = tracking_rules()
    loop = loop_rules()
    shared = (
        mining["extractor"] + mining["judge"] + loop["generator"] + tracking["generator"]
        + tracking["judge"] + loop["judge"] + loop["extractor"]
    )
    return {
        "shared": dump_rules(shared, directory / "shared.json"),
        "verifier_a": dump_rules(mining["verifier_a"], directory / "verifier_a.json"),
        "verifier_b": dump_rules(mining["verifier_b"], directory / "verifier_b.json"),
    }
