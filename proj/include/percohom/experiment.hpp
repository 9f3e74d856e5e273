#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "percohom/cell_problem.hpp"
#include "percohom/errors.hpp"
#include "percohom/estimators.hpp"
#include "percohom/lattice.hpp"
#include "percohom/walk.hpp"

namespace percohom {

inline constexpr const char* kToolVersion = "1.0.0";

struct StageSelection {
  bool sample = true;
  bool solve = true;
  bool walk = true;
  bool estimate = true;

  bool operator==(const StageSelection&) const = default;
  bool any() const { return sample || solve || walk || estimate; }
};

struct ExperimentConfig {
  // [lattice]
  LatticeSpec lattice{2, 64, true};
  double p = 0.0;
  std::uint64_t seed = 0;
  // [walk]
  std::uint64_t walks = 1000;
  double t_max = 1000.0;  // microscopic horizon; endpoints are rescaled by ε = t_max^(-1/2)
  StartPolicy start = StartPolicy::uniform_largest_cluster;
  Vertex start_vertex = 0;
  // [solver]
  SolverOptions solver;
  TreeOrder tree = TreeOrder::breadth_first;
  // [estimate]
  std::vector<double> eps;
  std::vector<double> delta{0.25, 0.125};
  int box_multiple = 4;   // M
  double chop_eps = 0.0;  // 0: finest scale whose enlarged boxes fit the torus
  std::vector<Rectangle> rectangles;
  int b0 = 0;
  int poincare_trials = 20;
  std::vector<double> heat_times{100, 200, 300, 400, 500, 600, 700, 800, 900, 1000};
  std::uint64_t heat_walks = 10000;
  int bootstrap = 1000;
  // [output]
  std::string out_dir = "out";
  StageSelection stages;

  double walk_eps() const { return 1.0 / std::sqrt(t_max); }

  double resolved_chop_eps() const {
    if (chop_eps > 0.0) return chop_eps;
    const double widest = *std::max_element(delta.begin(), delta.end());
    return (1.0 + box_multiple * widest / 2.0) / (lattice.side / 2.0);
  }

  bool operator==(const ExperimentConfig& o) const {
    auto same_rects = [](const std::vector<Rectangle>& a, const std::vector<Rectangle>& b) {
      if (a.size() != b.size()) return false;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].lo != b[i].lo || a[i].hi != b[i].hi) return false;
      return true;
    };
    return lattice.dimension == o.lattice.dimension && lattice.side == o.lattice.side && p == o.p &&
           seed == o.seed && walks == o.walks && t_max == o.t_max && start == o.start &&
           start_vertex == o.start_vertex && solver.tolerance == o.solver.tolerance &&
           solver.max_iterations == o.solver.max_iterations && solver.preconditioner == o.solver.preconditioner &&
           tree == o.tree && eps == o.eps && delta == o.delta && box_multiple == o.box_multiple &&
           chop_eps == o.chop_eps && same_rects(rectangles, o.rectangles) && b0 == o.b0 &&
           poincare_trials == o.poincare_trials && heat_times == o.heat_times && heat_walks == o.heat_walks &&
           bootstrap == o.bootstrap && out_dir == o.out_dir && stages == o.stages;
  }
};

// ---------------------------------------------------------------------------
// Config text format
// ---------------------------------------------------------------------------

namespace config_detail {

inline std::string_view trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string_view::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_list(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? ", " : "") + format_double(values[i]);
  return out;
}

class FieldParser {
 public:
  FieldParser(int line, std::string key) : line_(line), key_(std::move(key)) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw ValidationError("line " + std::to_string(line_) + ": " + key_ + ": " + what);
  }

  double real(std::string_view text) const {
    double v = 0.0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size() || text.empty() || !std::isfinite(v))
      fail("expected a real number, got '" + std::string(text) + "'");
    return v;
  }

  std::uint64_t unsigned_integer(std::string_view text) const {
    std::uint64_t v = 0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size() || text.empty())
      fail("expected a non-negative integer, got '" + std::string(text) + "'");
    return v;
  }

  long long integer(std::string_view text) const {
    long long v = 0;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size() || text.empty())
      fail("expected an integer, got '" + std::string(text) + "'");
    return v;
  }

  std::vector<double> real_list(std::string_view text) const {
    std::vector<double> out;
    for (auto item : split(text, ',')) out.push_back(real(item));
    return out;
  }

  // "[lo1,hi1]x[lo2,hi2]x..." separated by ';'
  std::vector<Rectangle> rectangles(std::string_view text) const {
    std::vector<Rectangle> out;
    for (auto item : split(text, ';')) {
      Rectangle r;
      for (auto factor : split(item, 'x')) {
        if (factor.size() < 2 || factor.front() != '[' || factor.back() != ']')
          fail("expected intervals like [lo,hi]x[lo,hi], got '" + std::string(item) + "'");
        const auto bounds = split(factor.substr(1, factor.size() - 2), ',');
        if (bounds.size() != 2) fail("interval needs exactly two bounds in '" + std::string(factor) + "'");
        r.lo.push_back(real(bounds[0]));
        r.hi.push_back(real(bounds[1]));
      }
      out.push_back(std::move(r));
    }
    return out;
  }

 private:
  int line_;
  std::string key_;
};

inline std::string format_rectangles(const std::vector<Rectangle>& rects) {
  std::string out;
  for (std::size_t i = 0; i < rects.size(); ++i) {
    if (i) out += "; ";
    for (std::size_t k = 0; k < rects[i].lo.size(); ++k) {
      if (k) out += "x";
      out += "[" + format_double(rects[i].lo[k]) + "," + format_double(rects[i].hi[k]) + "]";
    }
  }
  return out;
}

inline std::vector<double> default_eps(int side) {
  return {8.0 / side, 4.0 / side, 2.0 / side};
}

}  // namespace config_detail

/// Range checks, each error naming the offending field.
inline void validate_config(const ExperimentConfig& c) {
  const int d = c.lattice.dimension;
  const int side = c.lattice.side;
  require(d >= 2 && d <= kMaxDimension, "d: must lie in [2, " + std::to_string(kMaxDimension) + "]");
  require(side >= 4 && side % 2 == 0, "L: must be an even integer >= 4");
  c.lattice.validate();
  require(c.p >= 0.0 && c.p <= 1.0, "p: must lie in [0, 1]");
  require(c.walks >= 1, "N: must be >= 1");
  require(c.t_max > 0.0, "t_max: must be positive");
  require(c.start == StartPolicy::uniform_largest_cluster || c.start_vertex < c.lattice.vertex_count(),
          "start_vertex: outside the box");
  require(c.solver.tolerance > 0.0 && c.solver.tolerance < 1.0, "tol: must lie in (0, 1)");
  require(c.solver.max_iterations >= 0, "max_iterations: must be >= 0");
  require(!c.eps.empty(), "eps: needs at least one scale");
  for (double e : c.eps) require(e > 0.0 && 1.0 / e <= side / 2.0, "eps: each scale needs 0 < eps and 1/eps <= L/2");
  require(!c.delta.empty(), "delta: needs at least one value");
  for (double dl : c.delta) {
    require(dl > 0.0 && dl < 1.0, "delta: each value must lie in (0, 1)");
    require(c.box_multiple * dl <= 2.0, "M: M * delta must be <= 2 for every delta");
  }
  require(c.box_multiple >= 1, "M: must be >= 1");
  require(c.chop_eps >= 0.0, "chop_eps: must be >= 0");
  const double ce = c.resolved_chop_eps();
  for (double dl : c.delta)
    require((1.0 + c.box_multiple * dl / 2.0) / ce <= side / 2.0 + 1e-9,
            "chop_eps: enlarged boxes exceed the torus at this scale");
  for (const auto& r : c.rectangles) {
    require(static_cast<int>(r.lo.size()) == d, "rectangles: each rectangle needs d intervals");
    for (int k = 0; k < d; ++k)
      require(r.lo[k] >= -1.0 && r.hi[k] <= 1.0 && r.lo[k] <= r.hi[k], "rectangles: must lie inside [-1, 1]^d");
  }
  require(c.b0 >= 0 && c.b0 < d, "b0: must lie in [1, d]");
  require(c.poincare_trials >= 0, "poincare_trials: must be >= 0");
  require(!c.heat_times.empty(), "heat_times: needs at least one time");
  for (double t : c.heat_times) require(t >= 0.0, "heat_times: must be >= 0");
  require(c.heat_walks >= 1000, "heat_walks: must be >= 1000");
  require(c.bootstrap >= 2, "bootstrap: must be >= 2");
  require(!c.out_dir.empty(), "dir: must not be empty");
  require(c.stages.any(), "stages: select at least one stage");
}

/// Parse the sectioned key = value format. Required: d, L, p, seed.
inline ExperimentConfig parse_config(std::string_view text) {
  using namespace config_detail;
  ExperimentConfig c;
  std::string section;
  bool have_d = false, have_L = false, have_p = false, have_seed = false, have_eps = false, have_rects = false;
  std::map<std::string, int> seen;

  int line_no = 0;
  for (auto raw : split(text, '\n')) {
    ++line_no;
    auto line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = trim(line.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ValidationError("line " + std::to_string(line_no) + ": unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (section != "lattice" && section != "walk" && section != "solver" && section != "estimate" &&
          section != "output")
        throw ValidationError("line " + std::to_string(line_no) + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ValidationError("line " + std::to_string(line_no) + ": expected 'key = value'");
    if (section.empty())
      throw ValidationError("line " + std::to_string(line_no) + ": key outside of any section");
    const std::string key(trim(line.substr(0, eq)));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ValidationError("line " + std::to_string(line_no) + ": empty key");
    const std::string qualified = section + "." + key;
    if (seen.count(qualified))
      throw ValidationError("line " + std::to_string(line_no) + ": duplicate key '" + key + "' (first on line " +
                            std::to_string(seen[qualified]) + ")");
    seen[qualified] = line_no;
    const FieldParser f(line_no, key);

    if (section == "lattice") {
      if (key == "d") {
        const auto v = f.integer(value);
        if (v < 2 || v > kMaxDimension) f.fail("must lie in [2, " + std::to_string(kMaxDimension) + "]");
        c.lattice.dimension = static_cast<int>(v);
        have_d = true;
      } else if (key == "L") {
        const auto v = f.integer(value);
        if (v < 4 || v % 2 != 0 || v > (1LL << 31)) f.fail("must be an even integer >= 4");
        c.lattice.side = static_cast<int>(v);
        have_L = true;
      } else if (key == "p") {
        c.p = f.real(value);
        if (c.p < 0.0 || c.p > 1.0) f.fail("must lie in [0, 1]");
        have_p = true;
      } else if (key == "seed") {
        c.seed = f.unsigned_integer(value);
        have_seed = true;
      } else {
        f.fail("unknown key in [lattice]");
      }
    } else if (section == "walk") {
      if (key == "N") {
        c.walks = f.unsigned_integer(value);
      } else if (key == "t_max") {
        c.t_max = f.real(value);
      } else if (key == "start") {
        if (value == "uniform") c.start = StartPolicy::uniform_largest_cluster;
        else if (value == "fixed") c.start = StartPolicy::fixed_vertex;
        else f.fail("expected 'uniform' or 'fixed'");
      } else if (key == "start_vertex") {
        c.start_vertex = f.unsigned_integer(value);
      } else {
        f.fail("unknown key in [walk]");
      }
    } else if (section == "solver") {
      if (key == "tol") {
        c.solver.tolerance = f.real(value);
      } else if (key == "max_iterations") {
        c.solver.max_iterations = f.integer(value);
      } else if (key == "preconditioner") {
        if (value == "diagonal") c.solver.preconditioner = Preconditioner::diagonal;
        else if (value == "none") c.solver.preconditioner = Preconditioner::none;
        else f.fail("expected 'diagonal' or 'none'");
      } else if (key == "tree") {
        if (value == "bfs") c.tree = TreeOrder::breadth_first;
        else if (value == "dfs") c.tree = TreeOrder::depth_first;
        else f.fail("expected 'bfs' or 'dfs'");
      } else {
        f.fail("unknown key in [solver]");
      }
    } else if (section == "estimate") {
      if (key == "eps") {
        c.eps = f.real_list(value);
        have_eps = true;
      } else if (key == "delta") {
        c.delta = f.real_list(value);
      } else if (key == "M") {
        c.box_multiple = static_cast<int>(f.integer(value));
      } else if (key == "chop_eps") {
        c.chop_eps = f.real(value);
      } else if (key == "rectangles") {
        c.rectangles = f.rectangles(value);
        have_rects = true;
      } else if (key == "b0") {
        c.b0 = static_cast<int>(f.integer(value)) - 1;
      } else if (key == "poincare_trials") {
        c.poincare_trials = static_cast<int>(f.integer(value));
      } else if (key == "heat_times") {
        c.heat_times = f.real_list(value);
      } else if (key == "heat_walks") {
        c.heat_walks = f.unsigned_integer(value);
      } else if (key == "bootstrap") {
        c.bootstrap = static_cast<int>(f.integer(value));
      } else {
        f.fail("unknown key in [estimate]");
      }
    } else {  // output
      if (key == "dir") {
        c.out_dir = std::string(value);
      } else if (key == "stages") {
        c.stages = StageSelection{false, false, false, false};
        for (auto s : split(value, ',')) {
          if (s == "sample") c.stages.sample = true;
          else if (s == "solve") c.stages.solve = true;
          else if (s == "walk") c.stages.walk = true;
          else if (s == "estimate") c.stages.estimate = true;
          else if (s == "all") c.stages = StageSelection{};
          else f.fail("unknown stage '" + std::string(s) + "'");
        }
      } else {
        f.fail("unknown key in [output]");
      }
    }
  }

  if (!have_d) throw ValidationError("d: required key missing from [lattice]");
  if (!have_L) throw ValidationError("L: required key missing from [lattice]");
  if (!have_p) throw ValidationError("p: required key missing from [lattice]");
  if (!have_seed) throw ValidationError("seed: required key missing from [lattice]");
  if (!have_eps) c.eps = default_eps(c.lattice.side);
  if (!have_rects) {
    c.rectangles.push_back(full_box(c.lattice.dimension));
    for (auto& r : orthants(c.lattice.dimension)) c.rectangles.push_back(std::move(r));
  }
  validate_config(c);
  return c;
}

/// Canonical text form; parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const ExperimentConfig& c) {
  using namespace config_detail;
  std::ostringstream out;
  out << "[lattice]\n"
      << "d = " << c.lattice.dimension << "\n"
      << "L = " << c.lattice.side << "\n"
      << "p = " << format_double(c.p) << "\n"
      << "seed = " << c.seed << "\n\n"
      << "[walk]\n"
      << "N = " << c.walks << "\n"
      << "t_max = " << format_double(c.t_max) << "\n"
      << "start = " << (c.start == StartPolicy::fixed_vertex ? "fixed" : "uniform") << "\n"
      << "start_vertex = " << c.start_vertex << "\n\n"
      << "[solver]\n"
      << "tol = " << format_double(c.solver.tolerance) << "\n"
      << "max_iterations = " << c.solver.max_iterations << "\n"
      << "preconditioner = " << (c.solver.preconditioner == Preconditioner::diagonal ? "diagonal" : "none") << "\n"
      << "tree = " << (c.tree == TreeOrder::breadth_first ? "bfs" : "dfs") << "\n\n"
      << "[estimate]\n"
      << "eps = " << format_list(c.eps) << "\n"
      << "delta = " << format_list(c.delta) << "\n"
      << "M = " << c.box_multiple << "\n"
      << "chop_eps = " << format_double(c.chop_eps) << "\n"
      << "rectangles = " << format_rectangles(c.rectangles) << "\n"
      << "b0 = " << (c.b0 + 1) << "\n"
      << "poincare_trials = " << c.poincare_trials << "\n"
      << "heat_times = " << format_list(c.heat_times) << "\n"
      << "heat_walks = " << c.heat_walks << "\n"
      << "bootstrap = " << c.bootstrap << "\n\n"
      << "[output]\n"
      << "dir = " << c.out_dir << "\n";
  std::vector<std::string> names;
  if (c.stages.sample) names.emplace_back("sample");
  if (c.stages.solve) names.emplace_back("solve");
  if (c.stages.walk) names.emplace_back("walk");
  if (c.stages.estimate) names.emplace_back("estimate");
  out << "stages = ";
  for (std::size_t i = 0; i < names.size(); ++i) out << (i ? ", " : "") << names[i];
  out << "\n";
  return out.str();
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

inline std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot read artifact " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return hex64(fnv1a64(buf.str()));
}

struct ArtifactRecord {
  std::string path;  // relative to the output directory
  std::string stage;
  std::string fnv1a64;
  std::uint64_t bytes = 0;
};

struct StageRecord {
  std::string name;
  bool complete = false;
  double seconds = 0.0;
  nlohmann::json info = nlohmann::json::object();
};

struct RunManifest {
  std::filesystem::path out_dir;
  std::string config_text;
  std::string tool_version = kToolVersion;
  std::vector<StageRecord> stages;
  std::vector<ArtifactRecord> artifacts;
  std::vector<std::string> warnings;
  bool complete = false;
  std::string failed_stage;
  std::string error;

  const StageRecord* stage(const std::string& name) const {
    for (const auto& s : stages)
      if (s.name == name) return &s;
    return nullptr;
  }
  const ArtifactRecord* artifact(const std::string& path) const {
    for (const auto& a : artifacts)
      if (a.path == path) return &a;
    return nullptr;
  }
};

inline nlohmann::json manifest_to_json(const RunManifest& m) {
  nlohmann::json j;
  j["tool"] = "percohom";
  j["version"] = m.tool_version;
  j["config"] = m.config_text;
  j["complete"] = m.complete;
  j["failed_stage"] = m.failed_stage.empty() ? nlohmann::json(nullptr) : nlohmann::json(m.failed_stage);
  j["error"] = m.error.empty() ? nlohmann::json(nullptr) : nlohmann::json(m.error);
  j["warnings"] = m.warnings;
  j["stages"] = nlohmann::json::array();
  for (const auto& s : m.stages)
    j["stages"].push_back({{"name", s.name}, {"complete", s.complete}, {"seconds", s.seconds}, {"info", s.info}});
  j["artifacts"] = nlohmann::json::array();
  for (const auto& a : m.artifacts)
    j["artifacts"].push_back({{"path", a.path}, {"stage", a.stage}, {"fnv1a64", a.fnv1a64}, {"bytes", a.bytes}});
  return j;
}

inline RunManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& out_dir) {
  RunManifest m;
  m.out_dir = out_dir;
  m.config_text = j.at("config").get<std::string>();
  m.tool_version = j.at("version").get<std::string>();
  m.complete = j.at("complete").get<bool>();
  if (!j.at("failed_stage").is_null()) m.failed_stage = j.at("failed_stage").get<std::string>();
  if (!j.at("error").is_null()) m.error = j.at("error").get<std::string>();
  m.warnings = j.at("warnings").get<std::vector<std::string>>();
  for (const auto& s : j.at("stages"))
    m.stages.push_back({s.at("name").get<std::string>(), s.at("complete").get<bool>(), s.at("seconds").get<double>(),
                        s.at("info")});
  for (const auto& a : j.at("artifacts"))
    m.artifacts.push_back({a.at("path").get<std::string>(), a.at("stage").get<std::string>(),
                           a.at("fnv1a64").get<std::string>(), a.at("bytes").get<std::uint64_t>()});
  return m;
}

inline RunManifest load_manifest(const std::filesystem::path& out_dir) {
  const auto path = out_dir / "manifest.json";
  std::ifstream in(path);
  require(static_cast<bool>(in), "no manifest at " + path.string());
  try {
    return manifest_from_json(nlohmann::json::parse(in), out_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed manifest " + path.string() + ": " + e.what());
  }
}

/// Exclusive per-directory lock held for the lifetime of a pipeline run.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw ValidationError("output directory is locked by another run: " + path_.string());
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirectoryLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct RunOptions {
  unsigned threads = 1;
  std::function<void(const std::string&)> on_warning;  // called as warnings arise
};

/// In-memory products shared between stages.
struct PipelineState {
  std::optional<BondConfiguration> config;
  std::optional<ClusterDecomposition> clusters;
  std::optional<ClusterGraph> cluster;
  std::vector<CellSolution> solutions;
  std::optional<CorrectorField> chi;
  std::optional<EndpointSample> endpoints;
  double cocycle_residual = 0.0;
  double harmonic_residual = 0.0;
};

namespace pipeline_detail {

inline nlohmann::json vector_json(const std::vector<double>& v) { return nlohmann::json(v); }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), "cannot write " + path.string());
  out << text;
  require(static_cast<bool>(out), "write failed for " + path.string());
}

inline std::string csv_double(double v) { return config_detail::format_double(v); }

}  // namespace pipeline_detail

/// Assemble the report document from estimator outputs.
inline nlohmann::json build_report(const ExperimentConfig& cfg, const PipelineState& st, unsigned threads,
                                   std::vector<std::pair<std::string, std::string>>& csv_out) {
  using pipeline_detail::csv_double;
  const int d = cfg.lattice.dimension;
  const auto& cluster = *st.cluster;
  nlohmann::json report;

  report["params"] = {{"d", d},
                      {"L", cfg.lattice.side},
                      {"p", cfg.p},
                      {"seed", cfg.seed},
                      {"N", cfg.walks},
                      {"t_max", cfg.t_max},
                      {"walk_eps", cfg.walk_eps()},
                      {"macroscopic_t", 1.0},
                      {"largest_cluster_size", cluster.size()},
                      {"box_volume", cfg.lattice.vertex_count()},
                      {"config", serialize_config(cfg)}};

  // Diffusivity: variational and MSD.
  std::vector<DirectionField> fields;
  for (const auto& s : st.solutions) fields.push_back(s.field);
  DiffusivityReport diff;
  diff.variational_sigma2 = variational_sigma2(cluster, std::span<const DirectionField>(fields));
  diff.msd = msd_sigma2(*st.endpoints, st.endpoints->t, cfg.bootstrap, counter_hash(cfg.seed, 0xB007));
  diff.side = cfg.lattice.side;
  diff.dimension = d;
  diff.p = cfg.p;
  diff.seed = cfg.seed;
  diff.walks = cfg.walks;
  diff.microscopic_time = cfg.t_max;
  const auto unprojected = unprojected_sigma2(cluster);
  double var_mean = 0.0;
  for (double v : diff.variational_sigma2) var_mean += v / d;

  report["variational_sigma2"] = diff.variational_sigma2;
  report["variational_sigma2_mean"] = var_mean;
  report["unprojected_sigma2"] = unprojected;
  report["msd"] = {{"value", diff.msd.mean_sigma2},
                   {"stderr", diff.msd.mean_sigma2_stderr},
                   {"per_direction", diff.msd.sigma2},
                   {"per_direction_stderr", diff.msd.sigma2_stderr},
                   {"degenerate", diff.msd.degenerate}};
  report["agreement"] = {{"difference", var_mean - diff.msd.mean_sigma2},
                         {"stderr", diff.msd.mean_sigma2_stderr},
                         {"within_3_stderr", diff.agrees(3.0)}};

  nlohmann::json cov = nlohmann::json::array(), cov_se = nlohmann::json::array();
  bool diagonal = true;
  std::ostringstream cov_csv;
  cov_csv << "i,j,covariance,stderr\n";
  for (int i = 0; i < d; ++i) {
    nlohmann::json row = nlohmann::json::array(), row_se = nlohmann::json::array();
    for (int j = 0; j < d; ++j) {
      row.push_back(diff.msd.cov(i, j));
      row_se.push_back(diff.msd.cov_stderr(i, j));
      cov_csv << i + 1 << ',' << j + 1 << ',' << csv_double(diff.msd.cov(i, j)) << ','
              << csv_double(diff.msd.cov_stderr(i, j)) << '\n';
      if (i != j && std::abs(diff.msd.cov(i, j)) > 3.0 * diff.msd.cov_stderr(i, j)) diagonal = false;
    }
    cov.push_back(row);
    cov_se.push_back(row_se);
  }
  report["covariance"] = {{"matrix", cov}, {"stderr", cov_se}, {"diagonal_within_3_stderr", diagonal}};
  csv_out.emplace_back("covariance.csv", cov_csv.str());

  // Sublinearity and box averages.
  const auto sub = sublinearity_statistic(*st.chi, cfg.eps);
  nlohmann::json sub_json = nlohmann::json::array();
  std::ostringstream sub_csv, box_csv;
  sub_csv << "eps,s,box_vertices";
  for (int b = 1; b <= d; ++b) sub_csv << ",a_eps" << b;
  sub_csv << '\n';
  box_csv << "eps,rectangle,value\n";
  double full_box_max = 0.0;
  for (const auto& entry : sub.entries) {
    const auto boxes = box_average_statistic(*st.chi, entry, cfg.rectangles, cfg.b0);
    sub_json.push_back({{"eps", entry.eps},
                        {"a_eps", entry.a_eps},
                        {"s", entry.s},
                        {"box_vertices", entry.box_vertices},
                        {"box_averages", boxes}});
    sub_csv << csv_double(entry.eps) << ',' << csv_double(entry.s) << ',' << entry.box_vertices;
    for (double a : entry.a_eps) sub_csv << ',' << csv_double(a);
    sub_csv << '\n';
    for (std::size_t r = 0; r < boxes.size(); ++r) {
      box_csv << csv_double(entry.eps) << ',' << r << ',' << csv_double(boxes[r]) << '\n';
      const auto& rect = cfg.rectangles[r];
      bool is_full = true;
      for (int k = 0; k < d; ++k) is_full = is_full && rect.lo[k] == -1.0 && rect.hi[k] == 1.0;
      if (is_full) full_box_max = std::max(full_box_max, std::abs(boxes[r]));
    }
  }
  report["sublinearity"] = sub_json;
  report["sublinearity_strictly_decreasing"] = sub.strictly_decreasing();
  report["rectangles"] = config_detail::format_rectangles(cfg.rectangles);
  report["b0"] = cfg.b0 + 1;
  csv_out.emplace_back("sublinearity.csv", sub_csv.str());
  csv_out.emplace_back("box_averages.csv", box_csv.str());

  // Poincaré constants.
  nlohmann::json poincare = nlohmann::json::array();
  std::ostringstream poi_csv;
  poi_csv << "eps,component_size,lambda1,constant,scaled_constant,best_trial_ratio\n";
  for (std::size_t i = 0; i < sub.entries.size(); ++i) {
    const double e = sub.entries[i].eps;
    const auto est = poincare_ratio(*st.config, cluster, e, cfg.poincare_trials, counter_hash(cfg.seed, 0x9000 + i));
    poincare.push_back({{"eps", e},
                        {"component_size", est.component_size},
                        {"lambda1", est.lambda1},
                        {"constant", est.constant},
                        {"scaled_constant", est.scaled_constant},
                        {"best_trial_ratio", est.best_trial_ratio}});
    poi_csv << csv_double(e) << ',' << est.component_size << ',' << csv_double(est.lambda1) << ','
            << csv_double(est.constant) << ',' << csv_double(est.scaled_constant) << ','
            << csv_double(est.best_trial_ratio) << '\n';
  }
  report["poincare"] = poincare;
  csv_out.emplace_back("poincare.csv", poi_csv.str());

  // Chopped-box bound.
  nlohmann::json chopped = nlohmann::json::array();
  std::ostringstream chop_csv;
  chop_csv << "eps,delta,M,lhs,energy,rhs,ratio\n";
  const double ce = cfg.resolved_chop_eps();
  for (double dl : cfg.delta) {
    const auto bound = chopped_box_bound(*st.chi, fields, ce, dl, cfg.box_multiple);
    chopped.push_back({{"eps", ce},
                       {"delta", dl},
                       {"M", cfg.box_multiple},
                       {"lhs", bound.lhs},
                       {"energy", bound.energy},
                       {"rhs", bound.rhs},
                       {"ratio", bound.ratio()}});
    chop_csv << csv_double(ce) << ',' << csv_double(dl) << ',' << cfg.box_multiple << ',' << csv_double(bound.lhs)
             << ',' << csv_double(bound.energy) << ',' << csv_double(bound.rhs) << ',' << csv_double(bound.ratio())
             << '\n';
  }
  report["chopped_box"] = chopped;
  csv_out.emplace_back("chopped_box.csv", chop_csv.str());

  // Heat kernel from the cluster root.
  const WalkEnvironment env(*st.config, *st.clusters);
  const auto heat = heat_kernel_return(env, cluster.root(), cfg.heat_times, cfg.heat_walks,
                                       counter_hash(cfg.seed, 0x4EA7), threads);
  nlohmann::json heat_entries = nlohmann::json::array();
  std::ostringstream heat_csv;
  heat_csv << "t,returns,walks,probability,wilson_lo,wilson_hi\n";
  for (const auto& e : heat.entries) {
    heat_entries.push_back({{"t", e.t},
                            {"returns", e.returns},
                            {"walks", e.walks},
                            {"probability", e.probability},
                            {"wilson", {e.wilson.lo, e.wilson.hi}}});
    heat_csv << csv_double(e.t) << ',' << e.returns << ',' << e.walks << ',' << csv_double(e.probability) << ','
             << csv_double(e.wilson.lo) << ',' << csv_double(e.wilson.hi) << '\n';
  }
  report["heat_kernel"] = {{"start_vertex", cluster.root()},
                           {"entries", heat_entries},
                           {"fitted", heat.fitted},
                           {"slope", heat.fitted ? nlohmann::json(heat.fit.slope) : nlohmann::json(nullptr)},
                           {"slope_stderr", heat.fitted ? nlohmann::json(heat.fit.slope_stderr) : nlohmann::json(nullptr)},
                           {"intercept", heat.fitted ? nlohmann::json(heat.fit.intercept) : nlohmann::json(nullptr)},
                           {"target_slope", -d / 2.0}};
  csv_out.emplace_back("heat_kernel.csv", heat_csv.str());

  // Gaussianity per direction.
  if (st.endpoints->size() >= 1000 && !diff.msd.degenerate) {
    std::vector<double> stat, pval;
    for (int b = 0; b < d; ++b) {
      const auto ks = gaussianity_test(*st.endpoints, b);
      stat.push_back(ks.statistic);
      pval.push_back(ks.p_value);
    }
    report["ks"] = {{"stat", stat}, {"p", pval}};
  } else {
    report["ks"] = {{"stat", nullptr}, {"p", nullptr}, {"skipped", "needs N >= 1000 and a non-degenerate sample"}};
  }

  report["identities"] = {{"cocycle_residual", st.cocycle_residual},
                          {"harmonic_residual", st.harmonic_residual},
                          {"full_box_average_max", full_box_max}};
  return report;
}

/// Run the selected stages in dependency order. Unselected upstream stages are
/// recomputed in memory (they are deterministic) but not persisted. On failure the
/// manifest is written with the failing stage named and the exception rethrown.
inline RunManifest run_pipeline(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  namespace fs = std::filesystem;
  validate_config(cfg);
  const fs::path dir = cfg.out_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(fs::is_directory(dir), "dir: cannot create output directory " + dir.string());
  DirectoryLock lock(dir);

  RunManifest manifest;
  manifest.out_dir = dir;
  manifest.config_text = serialize_config(cfg);

  // Keep records of stages from an earlier run with the same config.
  if (fs::exists(dir / "manifest.json")) {
    try {
      auto previous = load_manifest(dir);
      if (previous.config_text == manifest.config_text) {
        const StageSelection& s = cfg.stages;
        auto rerun = [&](const std::string& name) {
          return (name == "sample" && s.sample) || (name == "solve" && s.solve) || (name == "walk" && s.walk) ||
                 (name == "estimate" && s.estimate);
        };
        for (auto& st : previous.stages)
          if (st.complete && !rerun(st.name)) manifest.stages.push_back(st);
        for (auto& a : previous.artifacts)
          if (!rerun(a.stage) && fs::exists(dir / a.path) && file_hash(dir / a.path) == a.fnv1a64)
            manifest.artifacts.push_back(a);
      }
    } catch (const ValidationError&) {
      // unreadable manifest: start fresh
    }
  }

  auto warn = [&](const std::string& w) {
    manifest.warnings.push_back(w);
    if (opts.on_warning) opts.on_warning(w);
  };
  auto write_manifest = [&] {
    pipeline_detail::write_text(dir / "manifest.json", manifest_to_json(manifest).dump(2) + "\n");
  };
  auto record = [&](const std::string& stage, const std::string& rel) {
    const auto path = dir / rel;
    std::erase_if(manifest.artifacts, [&](const ArtifactRecord& a) { return a.path == rel; });
    manifest.artifacts.push_back({rel, stage, file_hash(path), static_cast<std::uint64_t>(fs::file_size(path))});
  };

  PipelineState st;
  std::string current;
  auto run_stage = [&](const std::string& name, bool persist, const std::function<void(StageRecord&)>& body) {
    current = name;
    StageRecord rec;
    rec.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    body(rec);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.complete = true;
    if (persist) {
      std::erase_if(manifest.stages, [&](const StageRecord& s) { return s.name == name; });
      manifest.stages.push_back(rec);
    }
  };

  const auto& S = cfg.stages;
  const bool need_solve = S.solve || S.estimate;
  const bool need_walk = S.walk || S.estimate;

  try {
    run_stage("sample", S.sample, [&](StageRecord& rec) {
      st.config = sample_bonds(cfg.lattice, cfg.p, cfg.seed);
      st.clusters = decompose_clusters(*st.config);
      const double fraction =
          static_cast<double>(st.clusters->largest_size()) / static_cast<double>(cfg.lattice.vertex_count());
      rec.info = {{"open_edges", st.config->open_edge_count()},
                  {"clusters", st.clusters->cluster_count()},
                  {"largest_cluster_size", st.clusters->largest_size()},
                  {"largest_cluster_fraction", fraction}};
      if (fraction < 0.1)
        warn("largest cluster holds " + std::to_string(fraction * 100.0) +
             "% of the box; p may be at or below criticality");
      if (S.sample) {
        std::ofstream out(dir / "bonds.perc", std::ios::binary | std::ios::trunc);
        write_bonds(out, *st.config);
        out.close();
        record("sample", "bonds.perc");
      }
    });

    if (need_solve) {
      run_stage("solve", S.solve, [&](StageRecord& rec) {
        st.cluster = build_largest_cluster_graph(*st.config, *st.clusters);
        st.solutions = solve_all_directions(*st.cluster, cfg.solver);
        st.chi = integrate_corrector(*st.cluster, std::span<const CellSolution>(st.solutions), cfg.tree);
        st.cocycle_residual = 0.0;
        nlohmann::json per = nlohmann::json::array();
        for (const auto& s : st.solutions) {
          st.cocycle_residual = std::max(st.cocycle_residual, verify_cocycle(s.field, *st.cluster));
          per.push_back({{"direction", s.axis + 1},
                         {"iterations", s.stats.iterations},
                         {"relative_residual", s.stats.relative_residual}});
        }
        st.harmonic_residual = verify_harmonic(*st.chi, *st.cluster);
        rec.info = {{"directions", per},
                    {"cluster_size", st.cluster->size()},
                    {"root", st.cluster->root()},
                    {"cocycle_residual", st.cocycle_residual},
                    {"harmonic_residual", st.harmonic_residual}};
        if (S.solve) {
          {
            std::ofstream out(dir / "corrector.gchi", std::ios::binary | std::ios::trunc);
            write_corrector(out, *st.chi);
          }
          record("solve", "corrector.gchi");
          for (const auto& s : st.solutions) {
            const std::string rel = "gradient_b" + std::to_string(s.axis + 1) + ".gfld";
            {
              std::ofstream out(dir / rel, std::ios::binary | std::ios::trunc);
              write_direction_field(out, s.field, *st.cluster);
            }
            record("solve", rel);
          }
        }
      });
    }

    if (need_walk) {
      run_stage("walk", S.walk, [&](StageRecord& rec) {
        if (auto w = horizon_warning(cfg.lattice, cfg.t_max)) warn(*w);
        if (cfg.start == StartPolicy::fixed_vertex)
          require(st.clusters->in_largest(cfg.start_vertex), "start_vertex: not in the largest cluster");
        const WalkEnvironment env(*st.config, *st.clusters);
        EnsembleSpec spec;
        spec.walks = cfg.walks;
        spec.t_max = 1.0;
        spec.base_seed = cfg.seed;
        spec.start = cfg.start;
        spec.start_vertex = cfg.start_vertex;
        st.endpoints = rescaled_endpoints(env, spec, cfg.walk_eps(), opts.threads);
        rec.info = {{"walks", cfg.walks}, {"eps", cfg.walk_eps()}, {"microscopic_time", cfg.t_max}};
        if (S.walk) {
          {
            std::ofstream out(dir / "endpoints.csv", std::ios::binary | std::ios::trunc);
            write_endpoint_csv(out, *st.endpoints);
          }
          record("walk", "endpoints.csv");
        }
      });
    }

    if (S.estimate) {
      run_stage("estimate", true, [&](StageRecord& rec) {
        std::vector<std::pair<std::string, std::string>> csv;
        const auto report = build_report(cfg, st, opts.threads, csv);
        pipeline_detail::write_text(dir / "report.json", report.dump(2) + "\n");
        record("estimate", "report.json");
        for (const auto& [name, text] : csv) {
          pipeline_detail::write_text(dir / name, text);
          record("estimate", name);
        }
        rec.info = {{"agreement", report["agreement"]["within_3_stderr"]}};
      });
    }
  } catch (const std::exception& e) {
    manifest.complete = false;
    manifest.failed_stage = current;
    manifest.error = e.what();
    write_manifest();
    throw;
  }

  manifest.complete = true;
  write_manifest();
  return manifest;
}

// ---------------------------------------------------------------------------
// Summary table
// ---------------------------------------------------------------------------

inline nlohmann::json load_report(const RunManifest& manifest) {
  const auto* stage = manifest.stage("estimate");
  require(stage != nullptr && stage->complete, "manifest has no completed estimate stage");
  const auto* art = manifest.artifact("report.json");
  require(art != nullptr, "manifest lists no report.json from the estimate stage");
  const auto path = manifest.out_dir / art->path;
  std::ifstream in(path);
  require(static_cast<bool>(in), "missing report file " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed report " + path.string() + ": " + e.what());
  }
}

/// Human-readable table of the report's headline numbers with PASS/FAIL verdicts.
inline std::string report_summary(const RunManifest& manifest) {
  const auto r = load_report(manifest);
  std::ostringstream out;
  out << std::setprecision(6);
  auto verdict = [](bool ok) { return ok ? "PASS" : "FAIL"; };
  const int d = r["params"]["d"].get<int>();

  out << "run: d=" << d << " L=" << r["params"]["L"] << " p=" << r["params"]["p"].get<double>()
      << " seed=" << r["params"]["seed"] << " N=" << r["params"]["N"] << " t_max=" << r["params"]["t_max"].get<double>()
      << "\n\n";
  out << std::left << std::setw(36) << "quantity" << std::setw(28) << "value" << "check\n";
  auto row = [&](const std::string& name, const std::string& value, const std::string& check) {
    out << std::left << std::setw(36) << name << std::setw(28) << value << check << "\n";
  };
  auto num = [](double v) {
    std::ostringstream s;
    s << std::setprecision(6) << v;
    return s.str();
  };

  for (int b = 0; b < d; ++b)
    row("variational sigma2 (b=" + std::to_string(b + 1) + ")", num(r["variational_sigma2"][b].get<double>()), "");
  for (int b = 0; b < d; ++b)
    row("msd sigma2 (b=" + std::to_string(b + 1) + ")",
        num(r["msd"]["per_direction"][b].get<double>()) + " +- " +
            num(r["msd"]["per_direction_stderr"][b].get<double>()),
        "");
  row("variational sigma2 (mean)", num(r["variational_sigma2_mean"].get<double>()), "");
  row("msd sigma2 (mean)", num(r["msd"]["value"].get<double>()) + " +- " + num(r["msd"]["stderr"].get<double>()),
      "");
  row("estimator agreement (3 se)", num(r["agreement"]["difference"].get<double>()),
      verdict(r["agreement"]["within_3_stderr"].get<bool>()));
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j)
      row("covariance (" + std::to_string(i + 1) + "," + std::to_string(j + 1) + ")",
          num(r["covariance"]["matrix"][i][j].get<double>()) + " +- " +
              num(r["covariance"]["stderr"][i][j].get<double>()),
          "");
  row("covariance diagonal (3 se)", "", verdict(r["covariance"]["diagonal_within_3_stderr"].get<bool>()));
  for (const auto& e : r["sublinearity"]) row("s(eps=" + num(e["eps"].get<double>()) + ")", num(e["s"].get<double>()), "");
  row("sublinearity trend", "", verdict(r["sublinearity_strictly_decreasing"].get<bool>()));
  if (!r["ks"]["p"].is_null()) {
    for (int b = 0; b < d; ++b) {
      const double p = r["ks"]["p"][b].get<double>();
      row("KS p-value (b=" + std::to_string(b + 1) + ")", num(p), verdict(p > 0.01));
    }
  } else {
    row("KS p-value", "skipped", "");
  }
  const auto& hk = r["heat_kernel"];
  if (hk["fitted"].get<bool>()) {
    const double slope = hk["slope"].get<double>();
    row("heat-kernel slope", num(slope) + " +- " + num(hk["slope_stderr"].get<double>()),
        verdict(std::abs(slope + d / 2.0) <= 0.15));
  } else {
    row("heat-kernel slope", "not fitted", "");
  }
  for (const auto& e : r["poincare"])
    row("Poincare K eps^2 (eps=" + num(e["eps"].get<double>()) + ")", num(e["scaled_constant"].get<double>()), "");
  for (const auto& e : r["chopped_box"])
    row("chopped-box ratio (delta=" + num(e["delta"].get<double>()) + ")", num(e["ratio"].get<double>()), "");
  const auto& id = r["identities"];
  row("cocycle residual", num(id["cocycle_residual"].get<double>()),
      verdict(id["cocycle_residual"].get<double>() <= 1e-8));
  row("harmonic residual", num(id["harmonic_residual"].get<double>()),
      verdict(id["harmonic_residual"].get<double>() <= 1e-8));
  row("full-box average", num(id["full_box_average_max"].get<double>()),
      verdict(id["full_box_average_max"].get<double>() <= 1e-12));
  return out.str();
}

}  // namespace percohom
