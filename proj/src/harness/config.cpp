#include <charconv>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "gmem/harness.hpp"

namespace gmem::harness {

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::kVectorAdd: return "vectoradd";
    case Scenario::kBp: return "bp";
    case Scenario::kChurn: return "churn";
    case Scenario::kPassthrough: return "passthrough-demo";
  }
  return "unknown";
}

std::string to_string(SimDeviceKind k) {
  switch (k) {
    case SimDeviceKind::kIntegratedGpu: return "integrated";
    case SimDeviceKind::kDiscreteGpu: return "discrete";
    case SimDeviceKind::kDmaDevice: return "dma";
  }
  return "unknown";
}

namespace {

std::optional<std::uint64_t> parse_uint(std::string_view text) {
  std::uint64_t v = 0;
  if (text.empty()) return std::nullopt;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) return std::nullopt;
  return v;
}

}  // namespace

std::optional<std::uint64_t> parse_size(const std::string& text) {
  static const std::pair<std::string_view, int> kSuffixes[] = {
      {"KiB", 10}, {"MiB", 20}, {"GiB", 30}};
  std::string_view digits = text;
  int shift = 0;
  for (const auto& [suffix, s] : kSuffixes) {
    if (digits.size() > suffix.size() && digits.ends_with(suffix)) {
      digits.remove_suffix(suffix.size());
      shift = s;
      break;
    }
  }
  auto v = parse_uint(digits);
  if (!v) return std::nullopt;
  if (shift && *v > (~0ull >> shift)) return std::nullopt;
  return *v << shift;
}

std::optional<BpDims> parse_dims(const std::string& text) {
  if (text == "paper-scale") return kPaperScaleDims;
  std::size_t v[3];
  std::string_view rest = text;
  for (int i = 0; i < 3; ++i) {
    const auto comma = rest.find(',');
    if ((i < 2) != (comma != std::string_view::npos)) return std::nullopt;
    auto n = parse_uint(rest.substr(0, comma));
    if (!n || *n == 0 || *n > (1u << 20)) return std::nullopt;
    v[i] = *n;
    rest = i < 2 ? rest.substr(comma + 1) : std::string_view{};
  }
  return BpDims{v[0], v[1], v[2]};
}

std::string validate(const RunConfig& cfg) {
  const bool faultable_scenario =
      cfg.scenario == Scenario::kVectorAdd || cfg.scenario == Scenario::kBp ||
      cfg.scenario == Scenario::kPassthrough;
  if (faultable_scenario && cfg.device == SimDeviceKind::kDmaDevice)
    return to_string(cfg.scenario) + " needs a fault-recoverable device";
  if (cfg.scenario == Scenario::kChurn && cfg.device != SimDeviceKind::kDmaDevice)
    return "churn runs on dma devices only";
  if (cfg.engines == 0 || cfg.engines > 64) return "engines must be in 1..64";
  if (cfg.scenario == Scenario::kBp && cfg.engines != 1) return "bp trains on a single device";
  if (cfg.scenario == Scenario::kPassthrough && cfg.engines != 1)
    return "passthrough-demo uses one device pair";
  // Every simulated device maps 4KiB and 2MiB pages.
  if (cfg.prep_granularity != kBasePageSize && cfg.prep_granularity != kLargePageSize)
    return "prep-granularity must be 4KiB or 2MiB";
  if (cfg.device_mem_bytes) {
    if (cfg.device != SimDeviceKind::kDiscreteGpu)
      return "dev-mem applies to discrete devices only";
    if (*cfg.device_mem_bytes < kBasePageSize) return "dev-mem must be at least 4KiB";
    if (*cfg.device_mem_bytes > (64ull << 30)) return "dev-mem must not exceed 64GiB";
  }
  if (cfg.tlb_capacity == 0) return "tlb-capacity must be positive";
  if (cfg.async_batch == 0) return "async-batch must be positive";
  if (cfg.buf_pages == 0 || cfg.buf_pages > 16) return "buf-pages must be in 1..16";
  if (cfg.region_pages == 0) return "region-pages must be positive";
  if (cfg.shrink > cfg.grow) return "shrink must not exceed grow";
  if (cfg.n > (std::uint64_t{1} << 28)) return "n is too large";
  // A shared table needs another attached device of the same format.
  if (cfg.pt_mode == AttachMode::kShared && cfg.device != SimDeviceKind::kIntegratedGpu &&
      cfg.engines < 2)
    return "shared pt-mode needs an integrated device or at least two engines";
  return {};
}

namespace {

const char* const kValueOptions[] = {
    "device", "pt-mode",    "policy", "prep-granularity", "dev-mem",    "tlb-capacity",
    "seed",   "async-batch", "flush-interval", "engines", "n",          "dims",
    "steps",  "iterations", "buf-pages", "unmap-mode",    "grow",       "shrink",
    "region-pages", "output", "trace"};
const char* const kFlagOptions[] = {"csv", "wall-time"};

template <typename T>
bool pick(const std::map<std::string, T>& table, const std::string& key, T& out) {
  auto it = table.find(key);
  if (it == table.end()) return false;
  out = it->second;
  return true;
}

// Applies textual option values; returns an error message on failure.
std::string apply_options(const std::map<std::string, std::string>& values, RunConfig& cfg) {
  static const std::map<std::string, Scenario> kScenarios = {
      {"vectoradd", Scenario::kVectorAdd},
      {"bp", Scenario::kBp},
      {"churn", Scenario::kChurn},
      {"passthrough-demo", Scenario::kPassthrough}};
  static const std::map<std::string, SimDeviceKind> kDevices = {
      {"integrated", SimDeviceKind::kIntegratedGpu},
      {"discrete", SimDeviceKind::kDiscreteGpu},
      {"dma", SimDeviceKind::kDmaDevice}};
  static const std::map<std::string, AttachMode> kModes = {{"shared", AttachMode::kShared},
                                                          {"coherent", AttachMode::kCoherent}};
  static const std::map<std::string, PlacementMode> kPolicies = {
      {"unique", PlacementMode::kUnique}, {"remote", PlacementMode::kReplicateRemote}};
  static const std::map<std::string, ChurnMode> kUnmapModes = {{"strict", ChurnMode::kStrict},
                                                              {"async", ChurnMode::kAsync}};

  auto get = [&](const std::string& key) -> const std::string* {
    auto it = values.find(key);
    return it == values.end() ? nullptr : &it->second;
  };

  const std::string* scen = get("scenario");
  if (!scen) return "missing scenario";
  if (!pick(kScenarios, *scen, cfg.scenario)) return "unknown scenario '" + *scen + "'";
  // Scenario-dependent device default.
  if (cfg.scenario == Scenario::kChurn) cfg.device = SimDeviceKind::kDmaDevice;
  if (cfg.scenario == Scenario::kPassthrough) cfg.device = SimDeviceKind::kIntegratedGpu;

  if (auto v = get("device"); v && !pick(kDevices, *v, cfg.device))
    return "bad device '" + *v + "'";
  if (auto v = get("pt-mode"); v && !pick(kModes, *v, cfg.pt_mode))
    return "bad pt-mode '" + *v + "'";
  if (auto v = get("policy"); v && !pick(kPolicies, *v, cfg.policy))
    return "bad policy '" + *v + "'";
  if (auto v = get("unmap-mode"); v && !pick(kUnmapModes, *v, cfg.unmap_mode))
    return "bad unmap-mode '" + *v + "'";

  auto size_opt = [&](const char* key, std::uint64_t& out) -> std::string {
    if (auto v = get(key)) {
      auto s = parse_size(*v);
      if (!s) return std::string("bad size for ") + key + ": '" + *v + "'";
      out = *s;
    }
    return {};
  };
  auto count_opt = [&](const char* key, auto& out) -> std::string {
    if (auto v = get(key)) {
      auto n = parse_uint(*v);
      if (!n) return std::string("bad number for ") + key + ": '" + *v + "'";
      out = static_cast<std::remove_reference_t<decltype(out)>>(*n);
    }
    return {};
  };

  std::string err;
  if (!(err = size_opt("prep-granularity", cfg.prep_granularity)).empty()) return err;
  if (auto v = get("dev-mem")) {
    if (*v != "unbounded") {
      auto s = parse_size(*v);
      if (!s) return "bad size for dev-mem: '" + *v + "'";
      cfg.device_mem_bytes = *s;
    }
  }
  if (!(err = count_opt("tlb-capacity", cfg.tlb_capacity)).empty()) return err;
  if (!(err = count_opt("seed", cfg.seed)).empty()) return err;
  if (!(err = count_opt("async-batch", cfg.async_batch)).empty()) return err;
  if (!(err = count_opt("flush-interval", cfg.flush_interval)).empty()) return err;
  if (!(err = count_opt("engines", cfg.engines)).empty()) return err;
  if (!(err = count_opt("n", cfg.n)).empty()) return err;
  if (!(err = count_opt("steps", cfg.steps)).empty()) return err;
  if (!(err = count_opt("iterations", cfg.iterations)).empty()) return err;
  if (!(err = count_opt("buf-pages", cfg.buf_pages)).empty()) return err;
  if (!(err = count_opt("grow", cfg.grow)).empty()) return err;
  if (!(err = count_opt("shrink", cfg.shrink)).empty()) return err;
  if (!(err = count_opt("region-pages", cfg.region_pages)).empty()) return err;
  if (auto v = get("dims")) {
    auto d = parse_dims(*v);
    if (!d) return "bad dims '" + *v + "'";
    cfg.dims = *d;
  }
  if (auto v = get("output")) cfg.output = *v;
  if (auto v = get("trace")) cfg.trace = *v;
  if (auto v = get("csv")) cfg.csv = *v == "true";
  if (auto v = get("wall-time")) cfg.wall_time = *v == "true";
  return validate(cfg);
}

// Reads a JSON config object into option strings.
std::string load_config_file(const std::string& path, std::map<std::string, std::string>& values) {
  std::ifstream in(path);
  if (!in) return "cannot open config file '" + path + "'";
  nlohmann::json doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) return "config file is not a JSON object";
  std::map<std::string, bool> known{{"scenario", true}};
  for (const char* k : kValueOptions) known[k] = true;
  for (const char* k : kFlagOptions) known[k] = true;
  for (const auto& [key, val] : doc.items()) {
    if (!known.count(key)) return "unknown config key '" + key + "'";
    if (val.is_string())
      values[key] = val.get<std::string>();
    else if (val.is_boolean())
      values[key] = val.get<bool>() ? "true" : "false";
    else if (val.is_number_unsigned())
      values[key] = std::to_string(val.get<std::uint64_t>());
    else
      return "config key '" + key + "' must be a string, boolean or non-negative integer";
  }
  return {};
}

}  // namespace

ParseOutcome parse_command_line(int argc, const char* const* argv) {
  CLI::App app{"Simulated heterogeneous memory management runs"};
  app.set_version_flag("--version", "gmemsim 1.0");

  std::string scenario;
  std::string config_path;
  app.add_option("scenario", scenario, "vectoradd | bp | churn | passthrough-demo");
  app.add_option("--config", config_path, "JSON file with option defaults");

  std::map<std::string, std::string> given;
  std::map<std::string, CLI::Option*> opts;
  for (const char* name : kValueOptions) opts[name] = app.add_option(std::string("--") + name, given[name]);
  std::map<std::string, bool> flags;
  for (const char* name : kFlagOptions) opts[name] = app.add_flag(std::string("--") + name, flags[name]);

  opts["device"]->description("integrated | discrete | dma");
  opts["pt-mode"]->description("shared | coherent");
  opts["policy"]->description("unique | remote");
  opts["prep-granularity"]->description("bytes zero-filled per first-touch fault (4KiB)");
  opts["dev-mem"]->description("discrete device memory, or 'unbounded'");
  opts["dims"]->description("bp layer sizes 'in,hidden,out' or 'paper-scale'");
  opts["unmap-mode"]->description("churn unmapping: strict | async");
  opts["engines"]->description("concurrent device engines");
  opts["output"]->description("report file (stdout by default)");
  opts["trace"]->description("access trace file");
  opts["csv"]->description("write the report as key,value lines");
  opts["wall-time"]->description("add wall_time_ms to the report");

  ParseOutcome outcome;
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream out, err;
    outcome.exit_code = app.exit(e, out, err) == 0 ? 0 : 2;
    outcome.message = out.str() + err.str();
    if (outcome.exit_code != 0) outcome.message += app.help();
    return outcome;
  }

  std::map<std::string, std::string> values;
  if (!config_path.empty()) {
    if (auto err = load_config_file(config_path, values); !err.empty()) {
      outcome.exit_code = 2;
      outcome.message = err + "\n";
      return outcome;
    }
  }
  if (!scenario.empty()) values["scenario"] = scenario;
  for (const char* name : kValueOptions)
    if (opts[name]->count() > 0) values[name] = given[name];
  for (const char* name : kFlagOptions)
    if (opts[name]->count() > 0) values[name] = "true";
  if (!values.count("seed")) {
    if (const char* env = std::getenv("GMEM_SIM_SEED")) values["seed"] = env;
  }

  RunConfig cfg;
  if (auto err = apply_options(values, cfg); !err.empty()) {
    outcome.exit_code = 2;
    outcome.message = err + "\n" + app.help();
    return outcome;
  }
  outcome.config = cfg;
  return outcome;
}

}  // namespace gmem::harness
