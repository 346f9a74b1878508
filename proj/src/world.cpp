#include "ulact/world.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ulact::world {

namespace {

constexpr float kObjectPalette[kNumObjects][3] = {
    {0.90f, 0.10f, 0.10f},
    {0.10f, 0.90f, 0.10f},
    {0.20f, 0.30f, 0.90f},
    {0.90f, 0.80f, 0.10f},
};
constexpr float kBackground[3] = {0.08f, 0.08f, 0.10f};
constexpr float kEffectorOpen[3] = {1.0f, 1.0f, 1.0f};
constexpr float kEffectorClosed[3] = {0.90f, 0.10f, 0.90f};
constexpr int kObjectHalf = 2;    // 5x5 square
constexpr int kEffectorHalf = 1;  // 3x3 square
constexpr float kAlignEps = 1e-4f;
constexpr float kReleaseEps = 1e-3f;
constexpr float kTransportLift = 0.12f;

int to_px(float v, int s) {
    int p = static_cast<int>(std::lround(v * static_cast<float>(s - 1)));
    return std::clamp(p, 0, s - 1);
}

float clampf(float v, float lo, float hi) { return std::min(std::max(v, lo), hi); }

void fill_square(Observation& obs, int cx, int cy, int half, const float* rgb, float depth_value) {
    const int s = obs.size;
    for (int y = std::max(0, cy - half); y <= std::min(s - 1, cy + half); ++y)
        for (int x = std::max(0, cx - half); x <= std::min(s - 1, cx + half); ++x) {
            for (int c = 0; c < 3; ++c)
                obs.rgb[static_cast<std::size_t>(c) * s * s + static_cast<std::size_t>(y) * s + x] = rgb[c];
            obs.depth[static_cast<std::size_t>(y) * s + x] = depth_value;
        }
}

float dist_xy(float ax, float ay, float bx, float by) {
    const float dx = ax - bx, dy = ay - by;
    return std::sqrt(dx * dx + dy * dy);
}

float clip_step(float v, float max_step) { return clampf(v, -max_step, max_step); }

// Expert phase targets. All phases are derived from the state alone, so the
// expert is memoryless and can be queried at arbitrary states.
struct Move {
    float tx, ty, tz;
    int grip;
};

Move approach_and_grasp(const WorldState& s, const ObjectState& t) {
    const bool aligned = std::abs(s.ex - t.x) < kAlignEps && std::abs(s.ey - t.y) < kAlignEps &&
                         std::abs(s.ez - t.h) < kAlignEps;
    if (aligned) return {s.ex, s.ey, s.ez, 1};
    return {t.x, t.y, t.h, 0};
}

float place_dest_x(const ObjectState& ref, TaskKind kind) {
    if (kind == TaskKind::place_in) return ref.x;
    return ref.x + (ref.x <= 0.85f ? 0.07f : -0.07f);
}

}  // namespace

std::uint32_t instruction_code(const WorldState& s) {
    return static_cast<std::uint32_t>(static_cast<int>(s.task)) * 256u +
           static_cast<std::uint32_t>(s.target) * 16u + static_cast<std::uint32_t>(s.ref);
}

TaskKind instruction_task(std::uint32_t code) { return static_cast<TaskKind>((code / 256u) % 16u); }
int instruction_target(std::uint32_t code) { return static_cast<int>((code / 16u) % 16u); }
int instruction_ref(std::uint32_t code) { return static_cast<int>(code % 16u); }

Observation render_observation(const WorldState& s, const WorldConfig& cfg) {
    const int sz = cfg.frame_size;
    Observation obs;
    obs.size = sz;
    obs.rgb.assign(static_cast<std::size_t>(3) * sz * sz, 0.0f);
    obs.depth.assign(static_cast<std::size_t>(sz) * sz, 0.0f);
    for (int c = 0; c < 3; ++c)
        std::fill_n(obs.rgb.begin() + static_cast<std::size_t>(c) * sz * sz,
                    static_cast<std::size_t>(sz) * sz, kBackground[c]);

    // Objects in index order: RGB squares are fixed-size and height-free,
    // depth encodes the top surface through the affine map.
    for (const auto& o : s.objects) {
        const float d = clampf(cfg.depth_offset + cfg.depth_gain * o.top(), 0.0f, 1.0f);
        fill_square(obs, to_px(o.x, sz), to_px(o.y, sz), kObjectHalf, kObjectPalette[o.color], d);
    }
    // Effector last; its color shows the gripper state, its depth shows z.
    const float ed = clampf(cfg.depth_offset + cfg.depth_gain * s.ez, 0.0f, 1.0f);
    fill_square(obs, to_px(s.ex, sz), to_px(s.ey, sz), kEffectorHalf,
                s.grip ? kEffectorClosed : kEffectorOpen, ed);
    return obs;
}

bool task_done(const WorldState& s, const WorldConfig& cfg) {
    const auto& t = s.objects[static_cast<std::size_t>(s.target)];
    switch (s.task) {
        case TaskKind::lift:
            return t.held && t.lift >= cfg.lift_threshold;
        case TaskKind::place_near: {
            const auto& r = s.objects[static_cast<std::size_t>(s.ref)];
            return !t.held && dist_xy(t.x, t.y, r.x, r.y) <= cfg.near_radius;
        }
        case TaskKind::place_in: {
            const auto& r = s.objects[static_cast<std::size_t>(s.ref)];
            return !t.held && dist_xy(t.x, t.y, r.x, r.y) <= cfg.in_radius;
        }
    }
    return false;
}

RobotAction scripted_expert_action(const WorldState& s, const WorldConfig& cfg) {
    RobotAction a;
    a.grip = s.grip;
    if (task_done(s, cfg)) return a;

    const auto& t = s.objects[static_cast<std::size_t>(s.target)];
    Move mv{s.ex, s.ey, s.ez, s.grip};

    if (!t.held) {
        mv = approach_and_grasp(s, t);
    } else if (s.task == TaskKind::lift) {
        const float goal = std::min(cfg.lift_goal, 0.98f - t.h);
        mv = {s.ex, s.ey, s.ez + (goal - t.lift), 1};
    } else {
        const auto& r = s.objects[static_cast<std::size_t>(s.ref)];
        const float dx = place_dest_x(r, s.task);
        const float dy = r.y;
        // Tall objects run into the z ceiling; carry them as high as fits.
        const float carry = std::min(kTransportLift, 0.98f - t.h);
        if (t.lift < carry - kAlignEps) {
            mv = {dx, dy, s.ez + (carry - t.lift), 1};
        } else if (std::abs(s.ex - dx) < kReleaseEps && std::abs(s.ey - dy) < kReleaseEps) {
            mv = {s.ex, s.ey, s.ez, 0};  // release
        } else {
            mv = {dx, dy, s.ez, 1};
        }
    }

    a.dp[0] = clip_step(mv.tx - s.ex, cfg.max_step);
    a.dp[1] = clip_step(mv.ty - s.ey, cfg.max_step);
    a.dp[2] = clip_step(mv.tz - s.ez, cfg.max_step);
    a.grip = mv.grip;
    return a;
}

WorldState step_world(const WorldState& s, const RobotAction& a, const WorldConfig& cfg) {
    WorldState n = s;
    const float old_z = n.ez;
    n.ex = clampf(n.ex + clip_step(a.dp[0], cfg.max_step), 0.0f, 1.0f);
    n.ey = clampf(n.ey + clip_step(a.dp[1], cfg.max_step), 0.0f, 1.0f);
    n.ez = clampf(n.ez + clip_step(a.dp[2], cfg.max_step), 0.0f, 1.0f);

    for (auto& o : n.objects) {
        if (o.held) {
            o.x = n.ex;
            o.y = n.ey;
            o.lift = std::max(0.0f, o.lift + (n.ez - old_z));
        }
    }

    const int g = a.grip ? 1 : 0;
    if (g == 1 && n.grip == 0) {
        // Closing: attach the nearest object within the grasp window.
        int best = -1;
        float best_d = 1e9f;
        for (int i = 0; i < kNumObjects; ++i) {
            const auto& o = n.objects[static_cast<std::size_t>(i)];
            if (o.held) continue;
            const float d = dist_xy(n.ex, n.ey, o.x, o.y);
            if (d <= cfg.grasp_xy_tol && std::abs(n.ez - o.h) <= cfg.grasp_z_tol && d < best_d) {
                best = i;
                best_d = d;
            }
        }
        if (best >= 0) {
            auto& o = n.objects[static_cast<std::size_t>(best)];
            o.held = true;
            o.x = n.ex;
            o.y = n.ey;
            o.lift = 0.0f;
        }
    } else if (g == 0 && n.grip == 1) {
        for (auto& o : n.objects) {
            if (o.held) {
                o.held = false;
                o.lift = 0.0f;  // drops back to the table
            }
        }
    }
    n.grip = g;
    return n;
}

WorldState init_state(std::uint64_t seed, TaskKind kind, [[maybe_unused]] const WorldConfig& cfg) {
    RngStream rng(seed, "world/init");
    WorldState s;
    s.task = kind;

    // Objects with pairwise separation so no square fully hides another.
    for (int i = 0; i < kNumObjects; ++i) {
        auto& o = s.objects[static_cast<std::size_t>(i)];
        o.color = i;
        for (int attempt = 0; attempt < 1000; ++attempt) {
            o.x = static_cast<float>(rng.next_uniform(0.12, 0.88));
            o.y = static_cast<float>(rng.next_uniform(0.12, 0.88));
            bool ok = true;
            for (int j = 0; j < i; ++j) {
                const auto& p = s.objects[static_cast<std::size_t>(j)];
                if (dist_xy(o.x, o.y, p.x, p.y) < 0.22f) {
                    ok = false;
                    break;
                }
            }
            if (ok) break;
            if (attempt == 999) throw std::runtime_error("world: failed to place objects");
        }
        o.h = static_cast<float>(rng.next_uniform(0.1, 0.9));
        o.held = false;
        o.lift = 0.0f;
    }

    s.target = static_cast<int>(rng.next_below(kNumObjects));
    if (kind == TaskKind::lift) {
        s.ref = s.target;
    } else {
        s.ref = static_cast<int>(rng.next_below(kNumObjects - 1));
        if (s.ref >= s.target) ++s.ref;
    }

    s.ex = static_cast<float>(rng.next_uniform(0.12, 0.88));
    s.ey = static_cast<float>(rng.next_uniform(0.12, 0.88));
    s.ez = 0.5f;
    s.grip = 0;
    return s;
}

Episode generate_episode(std::uint64_t seed, TaskKind kind, const WorldConfig& cfg) {
    Episode ep;
    ep.seed = seed;
    WorldState s = init_state(seed, kind, cfg);
    ep.instruction = instruction_code(s);
    for (int t = 0; t <= cfg.horizon; ++t) {
        EpisodeStep step;
        step.obs = render_observation(s, cfg);
        step.action = scripted_expert_action(s, cfg);
        step.state = s;
        ep.steps.push_back(std::move(step));
        if (task_done(s, cfg)) {
            ep.valid = true;
            break;
        }
        s = step_world(s, ep.steps.back().action, cfg);
    }
    return ep;
}

}  // namespace ulact::world
