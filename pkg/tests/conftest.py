import numpy as np
import pytest
from hypothesis import settings

from safepath.scene import AgentKind, AgentTrack, EgoState, Scene, Trajectory, straight_history

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def straight(speed=2.0, x=0.0, n=6):
    """Ego path along +y at constant speed (0.5 s cadence)."""
    return Trajectory([(x, speed * 0.5 * i) for i in range(1, n + 1)])


def make_scene(agents=(), speed=2.0):
    return Scene(EgoState(velocity=(0.0, speed), heading_speed=speed), tuple(agents),
                 straight_history(speed))


def parked(agent_id, xy, kind=AgentKind.VEHICLE, radius=1.0):
    return AgentTrack(agent_id, kind, xy, np.tile(xy, (6, 1)), radius)


@pytest.fixture
def empty_scene():
    return make_scene()


def fixture_instance(n_options, seed):
    """The MCQA instance every wire-transcript fixture was recorded against."""
    from safepath.generation import GeneratorConfig, generate_candidates
    from safepath.scoring import build_mcqa

    cs = generate_candidates(make_scene(speed=5.0), GeneratorConfig(k=n_options, seed=seed))
    return build_mcqa(cs, scene_ref=f"fixture-{seed}")


# one "PASS/FAIL criterion N: ..." line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
