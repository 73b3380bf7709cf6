#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cip/rng.hpp"
#include "cip/tensor.hpp"

namespace cip {

struct EpisodeInfo {
  int length = 0;
  bool success = false;
  bool terminal = false;    // this step ended an episode
  bool time_limit = false;  // episode ended by running out of steps
};

struct StepResult {
  std::vector<double> obs;
  double reward = 0.0;
  bool done = false;
  EpisodeInfo info;
};

// One seeded environment instance. Single-owner; all stochasticity comes
// from the instance's own Rng, so a seed pins the full trajectory for a
// fixed action sequence.
class Env {
 public:
  virtual ~Env() = default;
  virtual StepResult reset() = 0;
  virtual StepResult step(int action) = 0;
  virtual int obs_dim() const = 0;
  virtual int n_actions() const = 0;
  virtual int time_limit() const = 0;
  virtual std::string save_state() const = 0;
  virtual void load_state(const std::string& line) = 0;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

inline double parse_double(std::istream& in) {
  std::string tok;
  in >> tok;
  return std::strtod(tok.c_str(), nullptr);
}

}  // namespace detail

// --- 2D moving bandits ------------------------------------------------------
//
// The agent starts at the center of the unit square and is shown two random
// points; one of them (hidden) is the goal. Actions: up, down, left, right,
// stay; step size 0.05; reward 1 and termination within distance 0.1 of the
// goal point; 50-step episodes. Observation: (agent, point a, point b).
class BanditsEnv final : public Env {
 public:
  static constexpr int kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kStay = 4;
  static constexpr double kStepSize = 0.05;
  static constexpr double kGoalRadius = 0.1;
  static constexpr int kTimeLimit = 50;

  explicit BanditsEnv(std::uint64_t seed) : rng_(seed) {}

  StepResult reset() override {
    agent_ = {0.5, 0.5};
    point_a_ = {rng_.uniform(), rng_.uniform()};
    point_b_ = {rng_.uniform(), rng_.uniform()};
    goal_is_b_ = rng_.uniform_int(2) == 1;
    t_ = 0;
    done_ = false;
    needs_reset_ = false;
    StepResult r;
    r.obs = observe();
    return r;
  }

  StepResult step(int action) override {
    if (needs_reset_) throw std::runtime_error("BanditsEnv::step: episode is done, reset required");
    if (action < 0 || action >= 5) throw std::invalid_argument("BanditsEnv::step: bad action");
    switch (action) {
      case kUp: agent_[1] += kStepSize; break;
      case kDown: agent_[1] -= kStepSize; break;
      case kLeft: agent_[0] -= kStepSize; break;
      case kRight: agent_[0] += kStepSize; break;
      case kStay: break;
    }
    agent_[0] = std::min(1.0, std::max(0.0, agent_[0]));
    agent_[1] = std::min(1.0, std::max(0.0, agent_[1]));
    ++t_;
    const auto& goal = goal_is_b_ ? point_b_ : point_a_;
    const double dx = agent_[0] - goal[0], dy = agent_[1] - goal[1];
    const bool reached = std::sqrt(dx * dx + dy * dy) <= kGoalRadius;
    StepResult r;
    r.obs = observe();
    r.reward = reached ? 1.0 : 0.0;
    r.done = reached || t_ >= kTimeLimit;
    r.info.length = t_;
    r.info.success = reached;
    r.info.terminal = r.done;
    r.info.time_limit = r.done && !reached;
    done_ = r.done;
    needs_reset_ = r.done;
    return r;
  }

  int obs_dim() const override { return 6; }
  int n_actions() const override { return 5; }
  int time_limit() const override { return kTimeLimit; }

  // Test hook: pins the episode layout mid-episode.
  void place(std::array<double, 2> agent, std::array<double, 2> a, std::array<double, 2> b,
             bool goal_is_b) {
    agent_ = agent;
    point_a_ = a;
    point_b_ = b;
    goal_is_b_ = goal_is_b;
  }

  std::string save_state() const override {
    std::ostringstream out;
    out << "bandits " << rng_.save_state();
    for (double v : {agent_[0], agent_[1], point_a_[0], point_a_[1], point_b_[0], point_b_[1]})
      out << " " << detail::fmt_double(v);
    out << " " << (goal_is_b_ ? 1 : 0) << " " << t_ << " " << (needs_reset_ ? 1 : 0);
    return out.str();
  }

  void load_state(const std::string& line) override {
    std::istringstream in(line);
    std::string tag;
    in >> tag;
    if (tag != "bandits") throw std::invalid_argument("BanditsEnv::load_state: wrong tag");
    std::string rng_state;
    for (int i = 0; i < 7; ++i) {
      std::string tok;
      in >> tok;
      rng_state += (i ? " " : "") + tok;
    }
    rng_.load_state(rng_state);
    agent_[0] = detail::parse_double(in);
    agent_[1] = detail::parse_double(in);
    point_a_[0] = detail::parse_double(in);
    point_a_[1] = detail::parse_double(in);
    point_b_[0] = detail::parse_double(in);
    point_b_[1] = detail::parse_double(in);
    int goal_b = 0, needs = 0;
    in >> goal_b >> t_ >> needs;
    goal_is_b_ = goal_b != 0;
    needs_reset_ = needs != 0;
    done_ = needs_reset_;
  }

 private:
  std::vector<double> observe() const {
    return {agent_[0], agent_[1], point_a_[0], point_a_[1], point_b_[0], point_b_[1]};
  }

  Rng rng_;
  std::array<double, 2> agent_{0.5, 0.5};
  std::array<double, 2> point_a_{0, 0};
  std::array<double, 2> point_b_{0, 0};
  bool goal_is_b_ = false;
  int t_ = 0;
  bool done_ = false;
  bool needs_reset_ = true;
};

// --- stochastic four rooms --------------------------------------------------

// 11x11 grid, 17 interior wall cells, 104 open cells. '#' marks walls, '.'
// open floor; digit d marks an open cell that joins the goal set of every
// version >= d (v0 has 2 goals, v1 adds 2 more, v2 adds the 4 doorways).
inline const char* kFourRoomsDefaultMap =
    "0....#....1\n"
    ".....#.....\n"
    ".....2.....\n"
    ".....#.....\n"
    ".....#.....\n"
    "#2####.....\n"
    ".....###2##\n"
    ".....#.....\n"
    ".....2.....\n"
    ".....#.....\n"
    "1....#....0\n";

struct FourRoomsLayout {
  static constexpr int kSide = 11;
  static constexpr int kOpenCells = 104;

  std::array<bool, kSide * kSide> wall{};
  std::vector<int> open_cells;                 // flat grid index per cell id, row-major order
  std::array<int, kSide * kSide> cell_id{};    // grid index -> cell id, -1 for walls
  std::vector<std::vector<int>> goal_sets;     // goal_sets[v] = cell ids for version v

  static FourRoomsLayout parse(const std::string& text) {
    FourRoomsLayout lay;
    lay.cell_id.fill(-1);
    std::vector<std::string> rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) rows.push_back(line);
    }
    if (rows.size() != kSide)
      throw std::invalid_argument("four-rooms map: expected 11 lines, got " +
                                  std::to_string(rows.size()));
    std::vector<std::pair<int, int>> tiered;  // (tier, grid index)
    for (int r = 0; r < kSide; ++r) {
      if (rows[r].size() != kSide)
        throw std::invalid_argument("four-rooms map: line " + std::to_string(r) +
                                    " must have 11 characters");
      for (int c = 0; c < kSide; ++c) {
        const char ch = rows[r][c];
        const int g = r * kSide + c;
        if (ch == '#') {
          lay.wall[g] = true;
        } else if (ch == '.') {
          // open
        } else if (ch >= '0' && ch <= '9') {
          tiered.push_back({ch - '0', g});
        } else {
          throw std::invalid_argument("four-rooms map: bad character");
        }
      }
    }
    for (int g = 0; g < kSide * kSide; ++g) {
      if (!lay.wall[g]) {
        lay.cell_id[g] = static_cast<int>(lay.open_cells.size());
        lay.open_cells.push_back(g);
      }
    }
    if (static_cast<int>(lay.open_cells.size()) != kOpenCells)
      throw std::invalid_argument("four-rooms map: open cell count is " +
                                  std::to_string(lay.open_cells.size()) + ", expected 104");
    int max_tier = 0;
    for (auto& [tier, g] : tiered) max_tier = std::max(max_tier, tier);
    lay.goal_sets.assign(max_tier + 1, {});
    for (int v = 0; v <= max_tier; ++v)
      for (auto& [tier, g] : tiered)
        if (tier <= v) lay.goal_sets[v].push_back(lay.cell_id[g]);
    return lay;
  }

  static const FourRoomsLayout& default_layout() {
    static const FourRoomsLayout lay = parse(kFourRoomsDefaultMap);
    return lay;
  }

  static FourRoomsLayout load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("four-rooms map: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
  }

  int row_of(int cell) const { return open_cells[cell] / kSide; }
  int col_of(int cell) const { return open_cells[cell] % kSide; }

  // Cell reached by moving from `cell` in `dir` (0 up, 1 down, 2 left,
  // 3 right); walls and borders leave the position unchanged.
  int neighbor(int cell, int dir) const {
    int r = row_of(cell), c = col_of(cell);
    switch (dir) {
      case 0: --r; break;
      case 1: ++r; break;
      case 2: --c; break;
      case 3: ++c; break;
      default: throw std::invalid_argument("four-rooms: bad action");
    }
    if (r < 0 || r >= kSide || c < 0 || c >= kSide) return cell;
    const int g = r * kSide + c;
    return wall[g] ? cell : cell_id[g];
  }
};

// Agent navigates to a hidden goal drawn from the version's fixed goal set.
// With probability 1/3 the chosen action is replaced by one of the other
// three (each 1/9 overall). Observation: one-hot over the 104 open cells;
// no goal information. Reward 1 on entering the goal; 300-step limit.
class FourRoomsEnv final : public Env {
 public:
  static constexpr int kTimeLimit = 300;

  FourRoomsEnv(int version, std::uint64_t seed, const FourRoomsLayout* layout = nullptr)
      : layout_(layout ? layout : &FourRoomsLayout::default_layout()),
        version_(version),
        rng_(seed) {
    if (version < 0 || version >= static_cast<int>(layout_->goal_sets.size()))
      throw std::invalid_argument("FourRoomsEnv: unknown version v" + std::to_string(version));
  }

  StepResult reset() override {
    const auto& goals = layout_->goal_sets[version_];
    goal_cell_ = goals[rng_.uniform_int(static_cast<int>(goals.size()))];
    int draw = rng_.uniform_int(FourRoomsLayout::kOpenCells - 1);
    agent_cell_ = draw >= goal_cell_ ? draw + 1 : draw;
    t_ = 0;
    needs_reset_ = false;
    StepResult r;
    r.obs = observe();
    return r;
  }

  StepResult step(int action) override {
    if (needs_reset_) throw std::runtime_error("FourRoomsEnv::step: episode is done, reset required");
    if (action < 0 || action >= 4) throw std::invalid_argument("FourRoomsEnv::step: bad action");
    int executed = action;
    if (!slip_disabled_ && rng_.uniform() < (1.0 / 3.0)) {
      const int other = rng_.uniform_int(3);
      executed = other >= action ? other + 1 : other;
    }
    agent_cell_ = layout_->neighbor(agent_cell_, executed);
    ++t_;
    const bool reached = agent_cell_ == goal_cell_;
    StepResult r;
    r.obs = observe();
    r.reward = reached ? 1.0 : 0.0;
    r.done = reached || t_ >= kTimeLimit;
    r.info.length = t_;
    r.info.success = reached;
    r.info.terminal = r.done;
    r.info.time_limit = r.done && !reached;
    needs_reset_ = r.done;
    last_executed_ = executed;
    return r;
  }

  int obs_dim() const override { return FourRoomsLayout::kOpenCells; }
  int n_actions() const override { return 4; }
  int time_limit() const override { return kTimeLimit; }

  // Test hook: force deterministic transitions.
  void set_slip_disabled(bool v) { slip_disabled_ = v; }
  int last_executed_action() const { return last_executed_; }
  int agent_cell() const { return agent_cell_; }
  int goal_cell() const { return goal_cell_; }
  void place_agent(int cell) { agent_cell_ = cell; }
  const FourRoomsLayout& layout() const { return *layout_; }

  std::string save_state() const override {
    std::ostringstream out;
    out << "fourrooms " << version_ << " " << rng_.save_state() << " " << agent_cell_ << " "
        << goal_cell_ << " " << t_ << " " << (needs_reset_ ? 1 : 0);
    return out.str();
  }

  void load_state(const std::string& line) override {
    std::istringstream in(line);
    std::string tag;
    int version = 0;
    in >> tag >> version;
    if (tag != "fourrooms" || version != version_)
      throw std::invalid_argument("FourRoomsEnv::load_state: wrong tag/version");
    std::string rng_state;
    for (int i = 0; i < 7; ++i) {
      std::string tok;
      in >> tok;
      rng_state += (i ? " " : "") + tok;
    }
    rng_.load_state(rng_state);
    int needs = 0;
    in >> agent_cell_ >> goal_cell_ >> t_ >> needs;
    needs_reset_ = needs != 0;
  }

 private:
  std::vector<double> observe() const {
    std::vector<double> o(FourRoomsLayout::kOpenCells, 0.0);
    o[agent_cell_] = 1.0;
    return o;
  }

  const FourRoomsLayout* layout_;
  int version_;
  Rng rng_;
  int agent_cell_ = 0;
  int goal_cell_ = 0;
  int t_ = 0;
  bool needs_reset_ = true;
  bool slip_disabled_ = false;
  int last_executed_ = -1;
};

// Builds an env from its config string: "bandits" or "fourrooms-v0|v1|v2".
inline std::unique_ptr<Env> make_env(const std::string& spec, std::uint64_t seed,
                                     const FourRoomsLayout* layout = nullptr) {
  if (spec == "bandits") return std::make_unique<BanditsEnv>(seed);
  if (spec.rfind("fourrooms-v", 0) == 0 && spec.size() == 12) {
    const char v = spec[11];
    if (v >= '0' && v <= '9') return std::make_unique<FourRoomsEnv>(v - '0', seed, layout);
  }
  throw std::invalid_argument("make_env: unknown env spec '" + spec + "'");
}

// n independent instances seeded base_seed + i, with auto-reset: when an
// episode ends, the returned obs is the next episode's initial observation
// and info.terminal carries the pre-reset episode stats.
class VecEnv {
 public:
  VecEnv(const std::string& spec, int n, std::uint64_t base_seed,
         const FourRoomsLayout* layout = nullptr)
      : spec_(spec) {
    if (n < 1) throw std::invalid_argument("VecEnv: n must be >= 1");
    for (int i = 0; i < n; ++i)
      envs_.push_back(make_env(spec, base_seed + static_cast<std::uint64_t>(i), layout));
  }

  explicit VecEnv(std::vector<std::unique_ptr<Env>> envs, std::string spec = "custom")
      : spec_(std::move(spec)), envs_(std::move(envs)) {
    if (envs_.empty()) throw std::invalid_argument("VecEnv: n must be >= 1");
  }

  int size() const { return static_cast<int>(envs_.size()); }
  int obs_dim() const { return envs_[0]->obs_dim(); }
  int n_actions() const { return envs_[0]->n_actions(); }
  Env& env(int i) { return *envs_[i]; }

  std::vector<StepResult> reset_all() {
    std::vector<StepResult> out;
    out.reserve(envs_.size());
    for (auto& e : envs_) out.push_back(e->reset());
    return out;
  }

  std::vector<StepResult> step_all(const std::vector<int>& actions) {
    if (static_cast<int>(actions.size()) != size())
      throw std::invalid_argument("VecEnv::step_all: action count mismatch");
    std::vector<StepResult> out;
    out.reserve(envs_.size());
    for (int i = 0; i < size(); ++i) {
      StepResult r = envs_[i]->step(actions[i]);
      if (r.done) r.obs = envs_[i]->reset().obs;
      out.push_back(std::move(r));
    }
    return out;
  }

  const std::string& spec() const { return spec_; }

 private:
  std::string spec_;
  std::vector<std::unique_ptr<Env>> envs_;
};

// Observation rows packed into a {N, obs_dim} tensor.
inline Tensor obs_matrix(const std::vector<StepResult>& results) {
  const int n = static_cast<int>(results.size());
  const int d = static_cast<int>(results[0].obs.size());
  Tensor t = Tensor::zeros({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) t.at(i, j) = results[i].obs[j];
  return t;
}

}  // namespace cip
