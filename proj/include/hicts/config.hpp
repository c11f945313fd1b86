#pragma once

#include <hicts/evaluation.hpp>
#include <hicts/local_map.hpp>
#include <hicts/pose_graph.hpp>
#include <hicts/refinement.hpp>
#include <hicts/registration.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace hicts {

/// One experiment's knobs as flat key=value text. Every field has a default,
/// so an empty file (or no file) is a valid configuration.
struct PipelineConfig {
  // Graph layout and propagation.
  double map_node_distance{5.0};      // meters between map nodes
  double propagate_translation{0.01}; // meters
  double propagate_rotation_deg{1.0};
  double loop_sigma{5.0};             // meters, loop-candidate sampling
  double huber_delta{1.0};            // on map-edge residual norm

  // Local multiresolution map.
  int map_levels{4};
  double map_cell_size{0.25};    // finest level, meters
  double map_half_extent{4.0};   // finest level half width, meters
  int cell_capacity{100};
  int scan_ring_capacity{20};

  // Registration.
  double reg_sigma_floor{0.01};
  double reg_step_tolerance{1e-6};
  int reg_max_iterations{50};

  // Refinement and evaluation.
  int refine_budget{10};
  double mme_radius{kMmeDefaultRadius};

  // Execution.
  std::uint64_t seed{0};
  int threads{1};

  // Simulated dataset generation: a straight constant-speed run along +x.
  int sim_rings{16};
  int sim_lines{24};
  double sim_line_period{1.33e-3};
  double sim_vertical_fov_deg{30.0};
  double sim_max_range{100.0};
  double sim_noise_sigma{0.0};
  int sim_scan_count{10};
  double sim_speed{0.0};  // meters/second
};

namespace detail {

inline double parse_config_double(const std::string& value) {
  std::size_t used = 0;
  const double v = std::stod(value, &used);
  if (used != value.size()) throw std::invalid_argument("trailing characters");
  return v;
}

inline long long parse_config_int(const std::string& value) {
  std::size_t used = 0;
  const long long v = std::stoll(value, &used);
  if (used != value.size()) throw std::invalid_argument("trailing characters");
  return v;
}

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

using ConfigSetters =
    std::map<std::string, std::function<void(PipelineConfig&, const std::string&)>>;

inline const ConfigSetters& config_setters() {
  const auto dbl = [](double PipelineConfig::* field) {
    return [field](PipelineConfig& c, const std::string& v) {
      c.*field = parse_config_double(v);
    };
  };
  const auto intf = [](int PipelineConfig::* field) {
    return [field](PipelineConfig& c, const std::string& v) {
      c.*field = static_cast<int>(parse_config_int(v));
    };
  };
  static const ConfigSetters setters = {
      {"map_node_distance", dbl(&PipelineConfig::map_node_distance)},
      {"propagate_translation", dbl(&PipelineConfig::propagate_translation)},
      {"propagate_rotation_deg", dbl(&PipelineConfig::propagate_rotation_deg)},
      {"loop_sigma", dbl(&PipelineConfig::loop_sigma)},
      {"huber_delta", dbl(&PipelineConfig::huber_delta)},
      {"map_levels", intf(&PipelineConfig::map_levels)},
      {"map_cell_size", dbl(&PipelineConfig::map_cell_size)},
      {"map_half_extent", dbl(&PipelineConfig::map_half_extent)},
      {"cell_capacity", intf(&PipelineConfig::cell_capacity)},
      {"scan_ring_capacity", intf(&PipelineConfig::scan_ring_capacity)},
      {"reg_sigma_floor", dbl(&PipelineConfig::reg_sigma_floor)},
      {"reg_step_tolerance", dbl(&PipelineConfig::reg_step_tolerance)},
      {"reg_max_iterations", intf(&PipelineConfig::reg_max_iterations)},
      {"refine_budget", intf(&PipelineConfig::refine_budget)},
      {"mme_radius", dbl(&PipelineConfig::mme_radius)},
      {"seed",
       [](PipelineConfig& c, const std::string& v) {
         c.seed = static_cast<std::uint64_t>(parse_config_int(v));
       }},
      {"threads", intf(&PipelineConfig::threads)},
      {"sim_rings", intf(&PipelineConfig::sim_rings)},
      {"sim_lines", intf(&PipelineConfig::sim_lines)},
      {"sim_line_period", dbl(&PipelineConfig::sim_line_period)},
      {"sim_vertical_fov_deg", dbl(&PipelineConfig::sim_vertical_fov_deg)},
      {"sim_max_range", dbl(&PipelineConfig::sim_max_range)},
      {"sim_noise_sigma", dbl(&PipelineConfig::sim_noise_sigma)},
      {"sim_scan_count", intf(&PipelineConfig::sim_scan_count)},
      {"sim_speed", dbl(&PipelineConfig::sim_speed)},
  };
  return setters;
}

}  // namespace detail

inline void validate_config(const PipelineConfig& c) {
  const auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) {
      throw std::runtime_error(std::string("config: ") + name + " must be positive");
    }
  };
  positive(c.map_node_distance, "map_node_distance");
  positive(c.propagate_translation, "propagate_translation");
  positive(c.propagate_rotation_deg, "propagate_rotation_deg");
  positive(c.loop_sigma, "loop_sigma");
  positive(c.map_cell_size, "map_cell_size");
  positive(c.map_half_extent, "map_half_extent");
  positive(c.reg_sigma_floor, "reg_sigma_floor");
  positive(c.reg_step_tolerance, "reg_step_tolerance");
  positive(c.mme_radius, "mme_radius");
  positive(c.sim_line_period, "sim_line_period");
  positive(c.sim_vertical_fov_deg, "sim_vertical_fov_deg");
  positive(c.sim_max_range, "sim_max_range");
  positive(static_cast<double>(c.map_levels), "map_levels");
  positive(static_cast<double>(c.cell_capacity), "cell_capacity");
  positive(static_cast<double>(c.scan_ring_capacity), "scan_ring_capacity");
  positive(static_cast<double>(c.reg_max_iterations), "reg_max_iterations");
  positive(static_cast<double>(c.threads), "threads");
  positive(static_cast<double>(c.sim_rings), "sim_rings");
  positive(static_cast<double>(c.sim_lines), "sim_lines");
  positive(static_cast<double>(c.sim_scan_count), "sim_scan_count");
  if (c.refine_budget < 0) throw std::runtime_error("config: refine_budget must be >= 0");
  if (c.sim_noise_sigma < 0.0) {
    throw std::runtime_error("config: sim_noise_sigma must be >= 0");
  }
  if (c.huber_delta < 0.0) throw std::runtime_error("config: huber_delta must be >= 0");
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped,
/// missing keys keep their defaults.
inline PipelineConfig config_from_string(const std::string& text) {
  PipelineConfig config;
  std::istringstream stream(text);
  std::string line;
  int line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config: expected key=value at line " +
                               std::to_string(line_no));
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto& setters = detail::config_setters();
    const auto it = setters.find(key);
    if (it == setters.end()) {
      throw std::runtime_error("config: unknown key '" + key + "' at line " +
                               std::to_string(line_no));
    }
    try {
      it->second(config, value);
    } catch (const std::exception&) {
      throw std::runtime_error("config: bad value for '" + key + "' at line " +
                               std::to_string(line_no));
    }
  }
  validate_config(config);
  return config;
}

/// All keys in sorted order; config_from_string(config_to_string(c)) == c.
inline std::string config_to_string(const PipelineConfig& c) {
  std::string out;
  const auto emit_d = [&](const char* key, double v) {
    out += std::string(key) + "=" + format_double(v) + "\n";
  };
  const auto emit_i = [&](const char* key, long long v) {
    out += std::string(key) + "=" + std::to_string(v) + "\n";
  };
  emit_i("cell_capacity", c.cell_capacity);
  emit_d("huber_delta", c.huber_delta);
  emit_d("loop_sigma", c.loop_sigma);
  emit_d("map_cell_size", c.map_cell_size);
  emit_d("map_half_extent", c.map_half_extent);
  emit_i("map_levels", c.map_levels);
  emit_d("map_node_distance", c.map_node_distance);
  emit_d("mme_radius", c.mme_radius);
  emit_d("propagate_rotation_deg", c.propagate_rotation_deg);
  emit_d("propagate_translation", c.propagate_translation);
  emit_i("reg_max_iterations", c.reg_max_iterations);
  emit_d("reg_sigma_floor", c.reg_sigma_floor);
  emit_d("reg_step_tolerance", c.reg_step_tolerance);
  emit_i("refine_budget", c.refine_budget);
  emit_i("scan_ring_capacity", c.scan_ring_capacity);
  emit_i("seed", static_cast<long long>(c.seed));
  emit_i("sim_lines", c.sim_lines);
  emit_d("sim_line_period", c.sim_line_period);
  emit_d("sim_max_range", c.sim_max_range);
  emit_d("sim_noise_sigma", c.sim_noise_sigma);
  emit_i("sim_rings", c.sim_rings);
  emit_i("sim_scan_count", c.sim_scan_count);
  emit_d("sim_speed", c.sim_speed);
  emit_d("sim_vertical_fov_deg", c.sim_vertical_fov_deg);
  emit_i("threads", c.threads);
  return out;
}

inline PipelineConfig read_config_file(const std::string& path) {
  return config_from_string(read_text_file(path));
}

inline MapConfig map_config(const PipelineConfig& c) {
  MapConfig m;
  m.base_cell_size = c.map_cell_size;
  m.levels = c.map_levels;
  m.base_half_extent = c.map_half_extent;
  m.cell_capacity = static_cast<std::size_t>(c.cell_capacity);
  m.scan_ring_capacity = static_cast<std::size_t>(c.scan_ring_capacity);
  return m;
}

inline GraphConfig graph_config(const PipelineConfig& c) {
  GraphConfig g;
  g.map_node_distance = c.map_node_distance;
  g.propagate_translation = c.propagate_translation;
  g.propagate_rotation = c.propagate_rotation_deg * M_PI / 180.0;
  g.loop_sigma = c.loop_sigma;
  g.huber_delta = c.huber_delta;
  g.map = map_config(c);
  return g;
}

inline RegistrationConfig registration_config(const PipelineConfig& c) {
  RegistrationConfig r;
  r.sigma_floor = c.reg_sigma_floor;
  r.step_tolerance = c.reg_step_tolerance;
  r.max_iterations = c.reg_max_iterations;
  return r;
}

inline RefineConfig refine_config(const PipelineConfig& c) {
  RefineConfig r;
  r.registration = registration_config(c);
  r.mme_radius = c.mme_radius;
  r.selection_seed = c.seed;
  return r;
}

}  // namespace hicts
