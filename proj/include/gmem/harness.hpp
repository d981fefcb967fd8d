#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmem/kernels.hpp"
#include "gmem/sim.hpp"

namespace gmem::harness {

enum class Scenario : std::uint8_t { kVectorAdd, kBp, kChurn, kPassthrough };

std::string to_string(Scenario s);
std::string to_string(SimDeviceKind k);

struct RunConfig {
  Scenario scenario = Scenario::kVectorAdd;
  SimDeviceKind device = SimDeviceKind::kDiscreteGpu;
  AttachMode pt_mode = AttachMode::kCoherent;
  PlacementMode policy = PlacementMode::kUnique;
  std::uint64_t prep_granularity = kBasePageSize;
  // nullopt sizes device memory to hold the whole working set.
  std::optional<std::uint64_t> device_mem_bytes;
  std::size_t tlb_capacity = 64;
  std::uint64_t seed = 1;
  std::size_t async_batch = AsyncQueue::kDefaultBatch;
  std::uint64_t flush_interval = AsyncQueue::kDefaultInterval;
  std::size_t engines = 1;

  std::size_t n = 65536;  // vectoradd elements
  BpDims dims;
  std::size_t steps = 3;
  std::size_t iterations = 1000;
  std::size_t buf_pages = 16;
  ChurnMode unmap_mode = ChurnMode::kStrict;
  std::size_t grow = 4;
  std::size_t shrink = 2;
  std::size_t region_pages = 4;

  std::string output;  // empty writes to stdout
  std::string trace;
  bool csv = false;
  bool wall_time = false;
};

// Parses "4096", "64KiB", "1MiB", "2GiB". Rejects anything else.
std::optional<std::uint64_t> parse_size(const std::string& text);
// "in,hidden,out" or "paper-scale".
std::optional<BpDims> parse_dims(const std::string& text);

// Checks ranges and option combinations. Returns an error message, or an
// empty string when the configuration is usable.
std::string validate(const RunConfig& cfg);

struct ParseOutcome {
  std::optional<RunConfig> config;  // empty when the run should not proceed
  int exit_code = 0;
  std::string message;  // usage or error text
};

// Command line: `<scenario> [options]`. `--config FILE` reads a JSON object
// whose keys are option names without the leading dashes; command-line
// options win. GMEM_SIM_SEED supplies the seed when no --seed is given.
ParseOutcome parse_command_line(int argc, const char* const* argv);

// Flat report with sorted keys.
using Report = nlohmann::json;

struct RunResult {
  Status status = Status::kSuccess;
  std::string error;
  Report report;
  std::vector<TraceRecord> trace;
};

RunResult run_scenario(const RunConfig& cfg);

// Per-scenario entry points, also used by the tests.
RunResult run_vectoradd(const RunConfig& cfg);
RunResult run_bp(const RunConfig& cfg);
RunResult run_churn(const RunConfig& cfg);
RunResult run_passthrough_demo(const RunConfig& cfg);

Report config_echo(const RunConfig& cfg);
void add_metrics(Report& report, const MetricsSnapshot& m);

std::string format_json(const Report& report);
std::string format_csv(const Report& report);

// Whole CLI: parse, run, write. Returns the process exit code.
int run_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gmem::harness
