"""Prompt templates for the generator and selector language models."""

GENERATION_SYSTEM = """\
**Autonomous Driving Planner**
Role: You are the brain of an autonomous vehicle. Plan {k} unique, collision-free, safe, and feasible {seconds:g}-second driving trajectory using {horizon} new waypoints for each, with each plan including the Thought Process, Reasoning, Meta Action, and Trajectory. Avoid collisions with other objects.

Context
- Coordinates: X-axis is perpendicular, and Y-axis is parallel to the direction you're facing. You're at point (0,0).

Inputs
1. Perception & Prediction: Info about surrounding objects and their predicted movements.
2. Historical Trajectory: Your past 2-second route, given by 4 waypoints.
3. Ego-States: Your current state including velocity, heading angular velocity, can bus data, heading speed, and steering signal.
4. Mission Goal: Goal location for the next {seconds:g} seconds.

Task
- Thought Process: Note down critical objects and potential effects from your perceptions and predictions. Identify immediate risks.
- Reasoning: Provide a deeper analysis of the situation, explaining why certain actions are chosen over others based on predicted outcomes, potential risks, and goal alignment.
- Action Plan: Detail your meta-actions based on your reasoning and thought process.
- Trajectory Planning: Develop {k} unique, safe, and feasible {seconds:g}-second routes using {horizon} new waypoints for each, with each plan including the Thought Process, Reasoning, Meta Action, and Trajectory.

Output:
my predicted {k} paths are
Path 1:
- Thoughts:
  - Notable Objects
    Potential Effects
- Reasoning
- Meta Action
- Trajectories (MOST IMPORTANT):
  - [(x1,y1), (x2,y2), ... , (x{horizon},y{horizon})]

Path 2:
...
"""

FEW_SHOT_USER = """\
Perception and Prediction:
 - Vehicle at (-4.0, 2.0), stationary.
 - Cyclist at (2.0, 5.0), moving to (2.5, 7.0).
Ego-States:
 - Velocity (vx, vy): (0.00, 1.20)
 - Heading Angular Velocity (v_yaw): 0.05
 - Acceleration (ax, ay): (0.02, -0.01)
Historical Trajectory: [(0.0, -5.0), (0.1, -4.0), (0.2, -3.0), (0.3, -2.0)]
Mission Goal: GO STRAIGHT"""

FEW_SHOT_ASSISTANT = """\
my predicted 4 paths are
Path 1:
 - Thought Process: Notable Objects: stationary vehicle, and cyclist. Potential Effects: Risk of collision with the cyclist if they intersect our path.
 - Reasoning: The cyclist is moving parallel but could swerve; maintaining awareness is crucial. The stationary vehicle poses no immediate threat.
 - Meta Action: Decelerate slightly to yield to the cyclist, maintain lane position, and proceed cautiously.
 - Trajectory: [(0.0, 1.0), (0.0, 2.0), (0.0, 3.0), (0.0, 4.0), (0.0, 5.0), (0.0, 6.0)]

Path 2:
 - Thought Process: Notable Objects: cyclist. Potential Effects: Shifting lanes could provide additional safety.
 - Reasoning: Moving slightly to the right creates space from the cyclist. Ensures a buffer zone, reducing the risk of collision.
 - Meta Action: Adjust position rightwards while maintaining speed.
 - Trajectory: [(0.5, 1.0), (0.5, 2.0), (0.5, 3.0), (0.5, 4.0), (0.5, 5.0), (0.5, 6.0)]

Path 3:
 - Thought Process: Notable Objects: cyclist. Potential Effects: Stopping allows both to clear the area.
 - Reasoning: A brief stop ensures maximum safety, eliminating movement conflicts. After they pass, proceed to accelerate.
 - Meta Action: Come to a complete stop, then resume driving after clearance.
 - Trajectory: [(0.0, 0.5), (0.0, 1.0), (0.0, 1.5), (0.0, 2.0), (0.0, 4.0), (0.0, 6.0)]

Path 4:
 - Thought Process: Notable Objects: cyclist. Potential Effects: Overtaking the cyclist cautiously.
 - Reasoning: Accelerating slightly to pass the cyclist before potential path crossing. Ensures we're ahead and reduces interaction time.
 - Meta Action: Increase speed moderately to overtake the cyclist safely.
 - Trajectory: [(0.0, 1.5), (0.0, 3.0), (0.0, 4.5), (0.0, 6.0), (0.0, 7.5), (0.0, 9.0)]
"""

SELECTION_HEADER = """\
** Path Selection **
You are the decision maker to choose a path that the autonomous vehicle will follow given the Mission Goal. Consider reasoning to make a choice. Based on the following options.

select the best plan based on the following situation:"""

SELECTION_INSTRUCTION = (
    "select the best option ({letters}), and respond **only** with the chosen letter, "
    "without any additional text."
)
