#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ulact/rng.hpp"

namespace ulact::world {

// Top-down manipulation scene. RGB is orthographic and drawn with fixed-size
// squares, so it carries no information about object heights; the depth
// channel encodes heights through a fixed affine map. Grasping requires the
// effector z to match the object's height, which is the part of the task RGB
// alone cannot resolve.

enum class TaskKind : int { lift = 0, place_near = 1, place_in = 2 };

constexpr int kNumTaskKinds = 3;
constexpr int kNumObjects = 4;

inline const char* task_name(TaskKind k) {
    switch (k) {
        case TaskKind::lift: return "lift";
        case TaskKind::place_near: return "place-near";
        case TaskKind::place_in: return "place-in";
    }
    return "?";
}

struct WorldConfig {
    int frame_size = 32;
    int horizon = 40;
    float max_step = 0.08f;        // per-axis clip on effector deltas
    float lift_threshold = 0.05f;  // raise needed for lift success
    float lift_goal = 0.14f;       // expert raises this far
    float grasp_xy_tol = 0.06f;
    float grasp_z_tol = 0.06f;
    float near_radius = 0.12f;
    float in_radius = 0.05f;
    float depth_offset = 0.1f;  // depth = offset + gain * height
    float depth_gain = 0.8f;
};

struct ObjectState {
    int color = 0;  // palette id, doubles as the object id in instructions
    float x = 0, y = 0;
    float h = 0;  // physical height, visible only in depth
    bool held = false;
    float lift = 0;  // raise above resting pose; 0 unless held

    float top() const { return h + lift; }

    bool operator==(const ObjectState&) const = default;
};

struct WorldState {
    float ex = 0, ey = 0, ez = 0;  // effector position
    int grip = 0;                  // 1 = closed
    std::array<ObjectState, kNumObjects> objects{};
    TaskKind task = TaskKind::lift;
    int target = 0;
    int ref = 0;  // reference object for place tasks; == target for lift

    bool operator==(const WorldState&) const = default;
};

struct Observation {
    int size = 0;
    std::vector<float> rgb;    // 3 * S * S, row-major [c][y][x]
    std::vector<float> depth;  // S * S

    bool operator==(const Observation&) const = default;
};

struct RobotAction {
    std::array<float, 3> dp{};  // position delta
    std::array<float, 3> dr{};  // rotation delta, identically zero here
    int grip = 0;

    bool operator==(const RobotAction&) const = default;
};

struct EpisodeStep {
    Observation obs;
    RobotAction action;
    WorldState state;

    bool operator==(const EpisodeStep&) const = default;
};

struct Episode {
    std::uint64_t seed = 0;
    std::uint32_t instruction = 0;
    std::vector<EpisodeStep> steps;
    bool valid = false;

    bool operator==(const Episode&) const = default;
};

// instruction code = kind * 256 + target * 16 + ref
std::uint32_t instruction_code(const WorldState& s);
TaskKind instruction_task(std::uint32_t code);
int instruction_target(std::uint32_t code);
int instruction_ref(std::uint32_t code);

Observation render_observation(const WorldState& s, const WorldConfig& cfg);
RobotAction scripted_expert_action(const WorldState& s, const WorldConfig& cfg);
WorldState step_world(const WorldState& s, const RobotAction& a, const WorldConfig& cfg);
bool task_done(const WorldState& s, const WorldConfig& cfg);

WorldState init_state(std::uint64_t seed, TaskKind kind, const WorldConfig& cfg);
Episode generate_episode(std::uint64_t seed, TaskKind kind, const WorldConfig& cfg);

}  // namespace ulact::world
