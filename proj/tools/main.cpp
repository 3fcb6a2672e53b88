#include <functional>
#include <iostream>
#include <memory>
#include <vector>

#include "CLI11.hpp"
#include "commands.hpp"
#include "deltapress/error.hpp"
#include "settings.hpp"

namespace {

using deltapress::cli::Settings;
using json = nlohmann::json;

struct Subcommand {
  std::unique_ptr<Settings> settings;
  std::string config_path;
  std::function<int(const json&)> run;
};

Subcommand& add(CLI::App& app, std::vector<Subcommand>& subs, const std::string& name,
                const std::string& help, std::function<int(const json&)> run) {
  auto* sub = app.add_subcommand(name, help);
  auto& s = subs.emplace_back();
  s.settings = std::make_unique<Settings>(sub);
  s.run = std::move(run);
  sub->add_option("--config", s.config_path, "JSON file of defaults; flags override it");
  s.settings->integer("threads", nullptr, "worker bound (default: DELTAPRESS_THREADS or hardware)");
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deltapress: importance-aware delta compression and merging"};
  app.require_subcommand(1);
  std::vector<Subcommand> subs;
  subs.reserve(6);

  {
    auto& s = *add(app, subs, "delta", "write W_ft - W_base", deltapress::cli::cmd_delta).settings;
    s.string("base", nullptr, "base checkpoint");
    s.string("finetuned", nullptr, "fine-tuned checkpoint");
    s.string("include", nullptr, "regex selecting the compressible 2-D tensors");
    s.string("output", nullptr, "delta container to write");
  }
  {
    auto& s = *add(app, subs, "compress", "compress a delta into an artifact",
                   deltapress::cli::cmd_compress).settings;
    s.string("delta", nullptr, "delta container (alternative to --base/--finetuned)");
    s.string("base", nullptr, "base checkpoint");
    s.string("finetuned", nullptr, "fine-tuned checkpoint");
    s.string("include", nullptr, "regex selecting the compressible 2-D tensors");
    s.string("method", "impart", "impart | impart-qt | dare | lowrank | dense");
    s.number("alpha", nullptr, "target sparsity in [0, 1)");
    s.number("cr", nullptr, "target compression ratio");
    s.number("cr-qt", nullptr, "target combined ratio for impart-qt");
    s.number("beta", 0.7, "pre-prune ratio");
    s.number("c", 1.0, "importance exponent");
    s.string("bit-groups", "2:8,32:3,0:2", "count:bits groups in sigma order, 0 = rest");
    s.integer("blocksize", 128, "GPTQ column block");
    s.number("damping", 0.01, "Hessian ridge as a fraction of its mean diagonal");
    s.string("calibration", nullptr, "container of per-tensor inputs (cols x samples)");
    s.string("seed-salt", "", "prefix mixed into every mask seed");
    s.string("output", nullptr, "artifact to write");
    s.string("report", nullptr, "report JSON path (default: stdout)");
  }
  {
    auto& s = *add(app, subs, "reconstruct", "rebuild a checkpoint from base + artifact",
                   deltapress::cli::cmd_reconstruct).settings;
    s.string("artifact", nullptr, "compressed artifact");
    s.string("base", nullptr, "base checkpoint");
    s.string("output", nullptr, "checkpoint to write");
    s.flag("force", "skip the base digest check");
  }
  {
    auto& s = *add(app, subs, "merge", "merge several deltas into the base",
                   deltapress::cli::cmd_merge).settings;
    s.string("base", nullptr, "base checkpoint");
    s.list("models", "artifacts, delta containers or fine-tuned checkpoints");
    s.string("strategy", "ta", "ta | ties");
    s.number("lambda", 1.0, "merge scaling");
    s.number("retain", 1.0, "TIES keep fraction");
    s.string("pre", "none", "pre-sparsification: none | dare | impart");
    s.number("ratio", 0.0, "pre-sparsification ratio");
    s.number("beta", 0.7, "ImPart pre-prune ratio");
    s.number("c", 1.0, "ImPart importance exponent");
    s.flag("force", "skip base digest checks on artifacts");
    s.string("output", nullptr, "checkpoint to write");
    s.string("report", nullptr, "report JSON path (default: stdout)");
  }
  {
    auto& s = *add(app, subs, "bench", "synthetic method x CR benchmark",
                   deltapress::cli::cmd_bench).settings;
    s.string("spec", nullptr, "bench spec JSON (default: built-in grid)");
    s.string("output", nullptr, "report JSON path (default: stdout)");
    s.string("csv", nullptr, "CSV view of the rows");
  }
  {
    auto& s = *add(app, subs, "stats", "describe a container", deltapress::cli::cmd_stats).settings;
    s.string("input", nullptr, "checkpoint, delta or artifact");
    s.flag("spectrum", "singular value summary per 2-D tensor");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    for (auto& s : subs) {
      if (!s.settings->app()->parsed()) continue;
      const json file = s.config_path.empty() ? json::object()
                                               : deltapress::cli::load_config(s.config_path);
      return s.run(s.settings->resolve(file));
    }
  } catch (const deltapress::Error& e) {
    std::cerr << "deltapress: error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "deltapress: error: bad setting: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "deltapress: error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
