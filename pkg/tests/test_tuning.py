import pytest
from hypothesis import given, settings, strategies as st

from agentsea.agent import PlaybackBackend
from agentsea.tuning import (
    CSV_COLUMNS,
    LOCATE,
    ONLY,
    STANDARD_SCENE,
    STUDENT,
    TARGET_CLASSES,
    TERSE,
    EpisodeRecord,
    TargetSpec,
    make_scene,
    render_description,
    run_tuning,
    score,
    student_describe,
    teacher_feedback,
    tuning_csv,
)

BALL = TargetSpec("red ball", (0.30, 4.0))


def test_score_hand_example():
    filler = " ".join(f"There is a rock number {k}." for k in range(9))
    text = "There is a red ball on the left. " + filler
    words, rel = score(text, BALL)
    assert words == len(text.split())
    assert rel == pytest.approx(5.0)


def test_score_full_marks():
    words, rel = score("red ball: bearing 0.32 rad, range 4.1 m", BALL)
    assert (words, rel) == (8, 100.0)


def test_score_location_tolerance():
    assert score("red ball: bearing 0.45 rad, range 4.0 m", BALL)[1] == 50.0
    assert score("red ball: bearing 0.30 rad, range 4.5 m", BALL)[1] == 50.0


def test_score_absent_target():
    absent = TargetSpec("pink buoy")
    assert score("pink buoy: not present", absent)[1] == 100.0
    assert score("I can see a pink buoy.", absent)[1] == 0.0


def test_score_empty():
    assert score("", BALL) == (0, 0.0)


def test_feedback_ladder():
    c = STUDENT
    long = "There is a red ball on the left. There is a rock on the right."
    c = teacher_feedback(EpisodeRecord(1, long, 15, 25.0), BALL, c)
    assert c.constraint_clauses[-1] == ONLY.format(cls="red ball")
    located = "I can see a red ball sitting on the left at mid range and it looks quite round."
    c = teacher_feedback(EpisodeRecord(2, located, 17, 50.0), BALL, c)
    assert c.constraint_clauses[-1] == LOCATE
    wordy = "I can see a red ball at bearing 0.30 rad and range 4.0 m."
    c = teacher_feedback(EpisodeRecord(3, wordy, 14, 100.0), BALL, c)
    assert c.constraint_clauses[-1] == TERSE
    assert teacher_feedback(EpisodeRecord(4, "red ball: bearing 0.30 rad, range 4.0 m", 8, 100.0), BALL, c) is c


def test_render_terse_located():
    dets = [{"class": "rock", "bearing": 0.0, "range": 1.0}, {"class": "red ball", "bearing": 0.3, "range": 4.0}]
    text = render_description(dets, [ONLY.format(cls="red ball"), LOCATE, TERSE])
    assert text == "red ball: bearing 0.30 rad, range 4.0 m"
    assert render_description([], [ONLY.format(cls="red ball"), TERSE]) == "red ball: not present"


def test_standard_scene_converges():
    scene = make_scene(STANDARD_SCENE)
    recs = run_tuning(scene, "red ball")
    assert recs[0].relevance <= 20 and recs[0].word_count >= 30
    assert recs[-1].relevance == 100.0 and recs[-1].episode <= 6
    assert [r.relevance for r in recs] == sorted(r.relevance for r in recs)
    words = [r.word_count for r in recs]
    assert words == sorted(words, reverse=True)
    assert all(len(r.clauses) <= 3 for r in recs)


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 40), st.sampled_from(TARGET_CLASSES), st.integers(0, 3))
def test_monotone_and_bounded(scene_idx, cls, clutter):
    recs = run_tuning(make_scene(scene_idx, n_clutter=clutter), cls)
    rel = [r.relevance for r in recs]
    words = [r.word_count for r in recs]
    assert rel == sorted(rel) and words == sorted(words, reverse=True)
    assert rel[-1] == 100.0
    assert len(recs[-1].clauses) <= 3


def test_fixed_point_and_constrained_start():
    scene = make_scene(1)
    recs = run_tuning(scene, "pink buoy")
    done = STUDENT
    for clause in recs[-1].clauses:
        done = done.with_clause(clause)
    again = run_tuning(make_scene(1), "pink buoy", start=done)
    assert len(again) == 1 and again[0].relevance == 100.0
    assert again[0].response == recs[-1].response


def test_max_episodes_one():
    assert len(run_tuning(make_scene(2), "fishing net", max_episodes=1)) == 1
    with pytest.raises(ValueError):
        run_tuning(make_scene(2), "fishing net", max_episodes=0)


def test_student_describe_playback_passthrough():
    assert student_describe([], STUDENT, PlaybackBackend(['{"text": "hello"}'])) == "hello"


def test_csv_header():
    row = {"trial": 0, "target_class": "red ball", "episode": 1, "words": 5, "relevance_pct": 100.0,
           "constitution_digest": "ab"}
    assert tuning_csv([row]).splitlines()[0] == ",".join(CSV_COLUMNS)


def test_target_spec_validation():
    with pytest.raises(ValueError):
        TargetSpec("  ")
