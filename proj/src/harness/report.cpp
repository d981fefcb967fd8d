#include <fstream>
#include <ostream>
#include <sstream>

#include "gmem/harness.hpp"

namespace gmem::harness {

Report config_echo(const RunConfig& cfg) {
  Report r = Report::object();
  r["config.scenario"] = to_string(cfg.scenario);
  r["config.device"] = to_string(cfg.device);
  r["config.pt-mode"] = to_string(cfg.pt_mode);
  r["config.policy"] = to_string(cfg.policy);
  r["config.prep-granularity"] = cfg.prep_granularity;
  if (cfg.device_mem_bytes)
    r["config.dev-mem"] = *cfg.device_mem_bytes;
  else
    r["config.dev-mem"] = "unbounded";
  r["config.tlb-capacity"] = cfg.tlb_capacity;
  r["config.seed"] = cfg.seed;
  r["config.async-batch"] = cfg.async_batch;
  r["config.flush-interval"] = cfg.flush_interval;
  r["config.engines"] = cfg.engines;
  switch (cfg.scenario) {
    case Scenario::kVectorAdd:
      r["config.n"] = cfg.n;
      break;
    case Scenario::kBp: {
      std::ostringstream dims;
      dims << cfg.dims.in << ',' << cfg.dims.hidden << ',' << cfg.dims.out;
      r["config.dims"] = dims.str();
      r["config.steps"] = cfg.steps;
      break;
    }
    case Scenario::kChurn:
      r["config.iterations"] = cfg.iterations;
      r["config.buf-pages"] = cfg.buf_pages;
      r["config.unmap-mode"] = cfg.unmap_mode == ChurnMode::kAsync ? "async" : "strict";
      break;
    case Scenario::kPassthrough:
      r["config.grow"] = cfg.grow;
      r["config.shrink"] = cfg.shrink;
      r["config.region-pages"] = cfg.region_pages;
      break;
  }
  return r;
}

void add_metrics(Report& report, const MetricsSnapshot& m) {
  // Traffic columns under their tabulated names, and again spelled out.
  report["dev-zero-fill"] = m.zero_fill_bytes;
  report["host-to-dev"] = m.host_to_dev_bytes;
  report["dev-to-host"] = m.dev_to_host_bytes;
  report["zero_fill_bytes"] = m.zero_fill_bytes;
  report["zero_fill_events"] = m.zero_fill_events;
  report["host_to_dev_bytes"] = m.host_to_dev_bytes;
  report["dev_to_host_bytes"] = m.dev_to_host_bytes;
  report["dev_faults"] = m.dev_faults;
  report["cpu_faults"] = m.cpu_faults;
  report["tlb_invalidation_broadcasts"] = m.tlb_invalidation_broadcasts;
  report["tlb_entries_invalidated"] = m.tlb_entries_invalidated;
  report["pt_nodes_current"] = m.pt_nodes_current;
  report["pt_nodes_peak"] = m.pt_nodes_peak;
  report["evicted_pages"] = m.evicted_pages;
  report["migrations"] = m.migrations;
}

std::string format_json(const Report& report) { return report.dump(2) + "\n"; }

std::string format_csv(const Report& report) {
  std::string out = "key,value\n";
  for (const auto& [key, val] : report.items())
    out += key + "," + (val.is_string() ? val.get<std::string>() : val.dump()) + "\n";
  return out;
}

int run_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  auto parsed = parse_command_line(argc, argv);
  if (!parsed.config) {
    (parsed.exit_code == 0 ? out : err) << parsed.message;
    return parsed.exit_code;
  }
  const RunConfig& cfg = *parsed.config;
  RunResult res = run_scenario(cfg);

  if (!cfg.trace.empty()) {
    std::ofstream tf(cfg.trace);
    if (!tf) {
      err << "cannot write trace file '" << cfg.trace << "'\n";
      return 1;
    }
    AccessTrace t;
    for (const auto& r : res.trace) t.record(r);
    t.write(tf);
  }

  if (res.status != Status::kSuccess || !res.error.empty()) {
    err << "scenario " << to_string(cfg.scenario) << " failed: " << res.error;
    if (res.status != Status::kSuccess) err << " (" << to_string(res.status) << ")";
    err << '\n';
    if (res.report.is_null()) return 1;
  }

  const std::string text = cfg.csv ? format_csv(res.report) : format_json(res.report);
  if (cfg.output.empty()) {
    out << text;
  } else {
    std::ofstream of(cfg.output, std::ios::binary);
    if (!of) {
      err << "cannot write report file '" << cfg.output << "'\n";
      return 1;
    }
    of << text;
  }
  return res.status == Status::kSuccess && res.error.empty() ? 0 : 1;
}

}  // namespace gmem::harness
