// gpux: run scenarios, verify programs, check the corpus, generate traces.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "gpux/assembler.hpp"
#include "gpux/harness.hpp"
#include "gpux/verifier.hpp"

#ifndef GPUX_CORPUS_DIR
#define GPUX_CORPUS_DIR "corpus"
#endif

using namespace gpux;

namespace {

enum Exit { kOk = 0, kUsage = 1, kVerify = 2, kScenario = 3 };

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << data)) throw std::runtime_error("cannot write " + path);
}

// Assembly text or the binary form, told apart by the magic.
PolicyProgram load_program(const std::string& path) {
  auto data = slurp(path);
  if (data.rfind("GPUX", 0) == 0) return deserialize({reinterpret_cast<const uint8_t*>(data.data()), data.size()});
  return assemble(data);
}

Scenario scenario_with(const std::string& path, const std::vector<std::string>& policy_files) {
  auto s = load_scenario(path);
  for (const auto& f : policy_files) {
    try {
      s.policies.push_back(parse_policy_file(slurp(f)));
    } catch (const std::exception& e) {
      throw ScenarioError({f + ": " + e.what()});
    }
  }
  return s;
}

void setup_logging() {
  auto log = spdlog::stderr_color_mt("gpux");
  spdlog::set_default_logger(log);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::warn);
  if (const char* lvl = std::getenv("GPUX_LOG_LEVEL")) {
    auto l = spdlog::level::from_str(lvl);
    // from_str maps unknown names to off; only accept real ones.
    if (l != spdlog::level::off || std::string(lvl) == "off") spdlog::set_level(l);
    else spdlog::warn("ignoring GPUX_LOG_LEVEL={}", lvl);
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"GPU policy simulator"};
  app.require_subcommand(1);

  std::string scenario_path, json_out, csv_out, log_out;
  std::vector<std::string> policy_files;
  auto* run = app.add_subcommand("run", "Run a scenario and emit its report");
  run->add_option("scenario", scenario_path, "Scenario file")->required();
  run->add_option("--policy", policy_files, "Extra policy file to attach");
  run->add_option("--json", json_out, "Write the JSON report here (default: stdout)");
  run->add_option("--csv", csv_out, "Write the per-tenant CSV table here");
  run->add_option("--log", log_out, "Write the event log here");

  std::string prog_path, hook;
  auto* ver = app.add_subcommand("verify", "Verify a program against a hook");
  ver->add_option("program", prog_path, "Assembly (.gpa) or binary program")->required();
  ver->add_option("--hook", hook, "Hook to verify against (default: the program's own)");

  std::string corpus_dir = GPUX_CORPUS_DIR;
  auto* corpus = app.add_subcommand("corpus", "Check the labeled verifier corpus");
  corpus->add_option("--dir", corpus_dir, "Corpus directory");

  std::string tool_name;
  auto* tool = app.add_subcommand("tool", "Run an observability tool on a scenario");
  tool->add_option("name", tool_name, "kernelretsnoop, threadhist or launchlate")->required();
  tool->add_option("scenario", scenario_path, "Scenario file")->required();

  std::string pattern, trace_out;
  GenParams gp;
  uint64_t seed = 1, ws_mb = 8, capacity_mb = 64;
  auto* gen = app.add_subcommand("gen", "Generate an access trace");
  gen->add_option("pattern", pattern, "SEQ_SCAN, RANDOM, PERIODIC_SEQ, SPARSE_RANDOM, PERIODIC_BLOCK, STRIDE(s), ZIPF(t)")
      ->required();
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--working-set-mb", ws_mb, "Working set in MB");
  gen->add_option("--events", gp.events, "Number of accesses");
  gen->add_option("--gap-ns", gp.gap_ns, "Time between accesses");
  gen->add_option("--tenant", gp.tenant, "Tenant id written into the trace");
  gen->add_option("--capacity-mb", capacity_mb, "Device capacity, for the oversubscription ratio");
  gen->add_option("--period-pages", gp.period_pages, "PERIODIC_SEQ window");
  gen->add_option("--block-pages", gp.block_pages, "PERIODIC_BLOCK block size");
  gen->add_option("--hot-fraction", gp.hot_fraction, "SPARSE_RANDOM active share");
  gen->add_flag("--scatter", gp.scatter, "ZIPF: spread ranks over pages");
  gen->add_option("-o,--output", trace_out, "Write the trace here (default: stdout)");

  auto* maps = app.add_subcommand("maps", "Run a scenario and dump its maps");
  maps->add_option("scenario", scenario_path, "Scenario file")->required();

  std::string asm_in, asm_out;
  auto* as = app.add_subcommand("asm", "Assemble a program to the binary form");
  as->add_option("input", asm_in, "Assembly file")->required();
  as->add_option("-o,--output", asm_out, "Binary output")->required();

  auto* dis = app.add_subcommand("disasm", "Disassemble a binary program");
  dis->add_option("input", asm_in, "Binary or assembly file")->required();

  app.add_subcommand("policies", "List the policy catalog");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*run) {
      auto s = scenario_with(scenario_path, policy_files);
      spdlog::info("running {} (seed {})", s.name, s.seed);
      auto r = run_scenario(s);
      for (const auto& p : reconcile(r.report, r.log)) spdlog::error("reconciliation: {}", p);
      if (json_out.empty()) std::cout << emit_report(r.report, ReportFormat::Json);
      else write_report(json_out, r.report, ReportFormat::Json);
      if (!csv_out.empty()) write_report(csv_out, r.report, ReportFormat::Csv);
      if (!log_out.empty()) {
        std::ofstream out(log_out, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + log_out);
        write_log(out, r.log);
      }
      return kOk;
    }
    if (*ver) {
      auto prog = load_program(prog_path);
      if (hook.empty()) hook = prog.handler_name;
      if (!is_known_hook(hook)) {
        std::cerr << "unknown hook " << hook << "\n";
        return kUsage;
      }
      auto rep = verify(prog, context_schema(hook), HookBudget::defaults(hook));
      std::cout << rep.to_text();
      return rep.accepted() ? kOk : kVerify;
    }
    if (*corpus) {
      auto sum = corpus_check(corpus_dir);
      for (const auto& e : sum.entries) {
        std::cout << (e.passed ? "ok   " : "FAIL ") << e.file << "\n";
        if (!e.passed) std::cout << "  " << e.detail << "\n";
      }
      std::cout << sum.passed << "/" << sum.entries.size() << " passed (" << sum.accept_count << " accept, "
                << sum.reject_count << " reject)\n";
      return sum.ok() ? kOk : kVerify;
    }
    if (*tool) {
      if (tool_name != "kernelretsnoop" && tool_name != "threadhist" && tool_name != "launchlate") {
        std::cerr << "unknown tool " << tool_name << "\n";
        return kUsage;
      }
      std::cout << run_tool(tool_name, load_scenario(scenario_path)).to_text();
      return kOk;
    }
    if (*gen) {
      gp.working_set_bytes = ws_mb << 20;
      Pattern p;
      try {
        p = parse_pattern(pattern);
        apply_pattern_arg(pattern, gp);
      } catch (const TraceError& e) {
        std::cerr << e.what() << "\n";
        return kUsage;
      }
      auto t = gen_trace(p, gp, seed);
      std::ostringstream o;
      o << "# oversubscription " << static_cast<double>(t.working_set_bytes) / static_cast<double>(capacity_mb << 20)
        << "\n";
      write_trace(o, t);
      if (trace_out.empty()) std::cout << o.str();
      else spit(trace_out, o.str());
      return kOk;
    }
    if (*maps) {
      auto r = run_scenario(load_scenario(scenario_path));
      for (const auto& m : r.report.maps)
        for (const auto& [k, v] : m.entries) std::cout << m.name << '\t' << m.epoch << '\t' << k << '\t' << v << '\n';
      return kOk;
    }
    if (*as) {
      auto prog = assemble(slurp(asm_in));
      auto bytes = serialize(prog);
      spit(asm_out, std::string(bytes.begin(), bytes.end()));
      return kOk;
    }
    if (*dis) {
      std::cout << disassemble(load_program(asm_in));
      return kOk;
    }
    for (const auto& e : catalog())
      std::cout << e.kind << '\t' << e.family << '\t' << (e.domain == Domain::Device ? "device" : "host") << '\t'
                << e.tag << '\n';
    return kOk;
  } catch (const ScenarioError& e) {
    spdlog::error("{}", e.what());
    return kScenario;
  } catch (const AssembleError& e) {
    spdlog::error("line {}: {}", e.line(), e.what());
    return kVerify;
  } catch (const LoadError& e) {
    spdlog::error("{}\n{}", e.what(), e.report().to_text());
    return kVerify;
  } catch (const PolicyError& e) {
    spdlog::error("{}", e.what());
    return kVerify;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kScenario;
  }
}
