// rcd: data generation, two-stage training, decoding, sweeps, ablations and
// recall curves. Every command writes its outputs plus manifest.json into
// --out; `rcd replay <manifest>` reruns it and checks the output hashes.
//
// Exit codes: 0 ok, 1 other failure, 2 usage, 3 missing file, 4 parse
// failure, 5 dimension mismatch, 6 training failure.

#include "rcd/checkpoint.hpp"
#include "rcd/config.hpp"
#include "rcd/datagen.hpp"
#include "rcd/decode.hpp"
#include "rcd/eval.hpp"
#include "rcd/train.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace rcd;

namespace {

enum Exit { kOk = 0, kOther = 1, kUsage = 2, kMissing = 3, kParse = 4, kDims = 5, kTrain = 6 };

class UsageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Flag values; unset optionals leave the config file / defaults alone.
struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode, alpha, warm_start, out, kind;
  std::optional<double> threshold, t_res;
  std::optional<int> top_m, block_size, epochs;
  std::optional<std::string> data, heldout, ref, target, seqd, prompts, trace;
  std::vector<int> k;
};

Json flag_overrides(const Flags& f) {
  Json j = Json::object();
  if (f.seed) j["seed"] = *f.seed;
  if (f.mode) j["decode"]["mode"] = *f.mode;
  if (f.threshold) {
    j["decode"]["selection"] = "threshold";
    j["decode"]["threshold"] = *f.threshold;
  }
  if (f.top_m) {
    j["decode"]["selection"] = "top-m";
    j["decode"]["top_m"] = *f.top_m;
  }
  if (f.t_res) j["decode"]["t_res"] = *f.t_res;
  if (f.alpha) j["decode"]["alpha"] = *f.alpha;
  if (f.warm_start) j["decode"]["warm_start"] = *f.warm_start;
  if (f.block_size) {
    j["decode"]["block_size"] = *f.block_size;
    j["train"]["block_size"] = *f.block_size;
  }
  if (f.epochs) j["train"]["epochs"] = *f.epochs;
  if (f.kind) j["data"]["kind"] = *f.kind;
  if (!f.k.empty()) j["eval"]["recall_k"] = f.k;
  const std::pair<const char*, const std::optional<std::string>*> paths[] = {
      {"data", &f.data},       {"heldout", &f.heldout}, {"ref", &f.ref},     {"target", &f.target},
      {"seqd", &f.seqd},       {"prompts", &f.prompts}, {"trace", &f.trace}, {"out", &f.out}};
  for (const auto& [key, value] : paths) {
    if (*value) j["paths"][key] = **value;
  }
  return j;
}

// Collects outputs of one command run.
struct Run {
  RunConfig cfg;
  Manifest manifest;
  fs::path out;

  fs::path output(const std::string& name) {
    manifest.outputs[name] = "";
    return out / name;
  }
  void write(const std::string& name, const std::string& bytes) { write_file_bytes(output(name), bytes); }

  const std::string& input(const std::string& path, const char* what) {
    if (path.empty()) throw UsageError(std::string("missing input: ") + what);
    if (!fs::exists(path)) {
      throw fs::filesystem_error(std::string(what) + " not found", fs::path(path),
                                 std::make_error_code(std::errc::no_such_file_or_directory));
    }
    manifest.inputs[path] = sha256_file(path);
    return path;
  }

  void finish() {
    for (auto& [name, hash] : manifest.outputs) hash = sha256_file(out / name);
    write_manifest(manifest, out);
  }
};

std::string train_log_csv_header() { return "step,epoch,loss,lr,seed\n"; }

TrainLogger csv_logger(std::ostringstream& os) {
  os << train_log_csv_header() << std::setprecision(9);
  return [&os](const TrainLogRow& r) {
    os << r.step << ',' << r.epoch << ',' << r.loss << ',' << r.lr << ',' << r.seed << '\n';
  };
}

DenoiserParams<float> load_model(Run& run, const std::string& path, const char* what) {
  return load_checkpoint<float>(run.input(path, what));
}

void check_vocab(const Dataset& data, const ModelDims& dims) {
  if (data.vocab != dims.vocab) {
    throw DimensionMismatch("dataset vocabulary " + std::to_string(data.vocab) + " != model vocabulary " +
                            std::to_string(dims.vocab));
  }
}

std::vector<Task> held_out_tasks(Run& run) {
  Dataset data = load_dataset(run.input(run.cfg.paths.heldout, "held-out task set (--heldout)"));
  if (run.cfg.eval.max_tasks > 0 && data.records.size() > static_cast<std::size_t>(run.cfg.eval.max_tasks)) {
    data.records.resize(static_cast<std::size_t>(run.cfg.eval.max_tasks));
  }
  return run.cfg.data.kind == "reverse" ? reverse_tasks(data) : addition_tasks(data);
}

// ---------------------------------------------------------------------------

void cmd_gen(Run& run) {
  const auto& d = run.cfg.data;
  if (d.kind == "markov") {
    const MarkovSpec train_spec = d.markov_spec(stream_seed(run.cfg.seed, "data", 0));
    const MarkovSpec held_spec = d.markov_spec(stream_seed(run.cfg.seed, "data", 1));
    save_dataset(gen_markov_corpus(train_spec, d.train_blocks, d.block_len), run.output("train.txt"));
    save_markov_spec(train_spec, run.output(markov_sidecar("train.txt").string()));
    save_dataset(gen_markov_corpus(held_spec, d.heldout_blocks, d.block_len), run.output("heldout.txt"));
    save_markov_spec(held_spec, run.output(markov_sidecar("heldout.txt").string()));
  } else if (d.kind == "reverse") {
    ReverseConfig r;
    r.min_len = d.min_len;
    r.max_len = d.max_len;
    r.count = d.train_count;
    r.seed = stream_seed(run.cfg.seed, "data", 0);
    save_dataset(gen_reverse_corpus(r), run.output("train.txt"));
    r.count = d.heldout_count;
    r.seed = stream_seed(run.cfg.seed, "data", 1);
    save_dataset(gen_reverse_corpus(r), run.output("heldout.txt"));
  } else {
    AdditionConfig a;
    a.min_digits = d.min_digits;
    a.max_digits = d.max_digits;
    a.with_cot = d.with_cot;
    a.count = d.train_count;
    a.seed = stream_seed(run.cfg.seed, "data", 0);
    save_dataset(gen_addition_corpus(a), run.output("train.txt"));
    a.count = d.heldout_count;
    a.seed = stream_seed(run.cfg.seed, "data", 1);
    save_dataset(gen_addition_corpus(a), run.output("heldout.txt"));
  }
}

void cmd_train_ref(Run& run) {
  const Dataset data = load_dataset(run.input(run.cfg.paths.data, "training data (--data)"));
  check_vocab(data, run.cfg.ref_model);
  std::ostringstream log;
  const auto ref = train_reference(data, run.cfg.ref_model, run.cfg.train, csv_logger(log));
  save_checkpoint(ref, run.output("ref.ckpt"));
  run.write("train_log.csv", log.str());
}

void cmd_train_target(Run& run) {
  const Dataset data = load_dataset(run.input(run.cfg.paths.data, "training data (--data)"));
  check_vocab(data, run.cfg.model);
  std::ostringstream log;
  if (run.cfg.decode.mode == DecodeMode::RCD) {
    const auto ref = load_model(run, run.cfg.paths.ref, "reference checkpoint (--ref)");
    const auto target = train_target_rcd(ref, data, run.cfg.model, run.cfg.train, csv_logger(log));
    save_checkpoint(target, run.output("target.ckpt"));
  } else {
    const auto seqd = train_reference(data, run.cfg.model, run.cfg.train, csv_logger(log));
    save_checkpoint(seqd, run.output("target.ckpt"));
  }
  run.write("train_log.csv", log.str());
}

void cmd_decode(Run& run) {
  const auto& c = run.cfg;
  const auto target = load_model(run, c.paths.target, "target checkpoint (--target)");
  std::optional<DenoiserParams<float>> ref;
  if (c.decode.mode == DecodeMode::RCD && c.decode.warm_start == WarmStart::Reference) {
    ref = load_model(run, c.paths.ref, "reference checkpoint (--ref)");
  }
  const Tokenizer tok;
  std::istringstream prompts(read_file_bytes(run.input(c.paths.prompts, "prompt file (--prompts)")));
  std::ostringstream gens;
  DecodeTrace all;
  int block_offset = 0;
  std::string line;
  for (std::uint64_t i = 0; std::getline(prompts, line); ++i) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    TokenSeq prompt;
    try {
      prompt = tok.encode(line);
    } catch (const std::invalid_argument& e) {
      throw ParseError("prompt line " + std::to_string(i + 1) + ": " + e.what());
    }
    const auto r = decode_sequence<float>(target, ref ? &*ref : nullptr, prompt, c.eval.num_blocks, c.decode, i);
    gens << tok.decode(std::span<const int>(r.tokens).subspan(prompt.size())) << '\n';
    for (auto s : r.trace.steps) {
      s.block += block_offset;
      all.steps.push_back(std::move(s));
    }
    block_offset += r.blocks;
  }
  run.write("generations.txt", gens.str());
  run.write("trace.ndjson", trace_to_ndjson(all));
}

void cmd_sweep(Run& run) {
  const auto& c = run.cfg;
  const auto seqd = load_model(run, c.paths.seqd, "SeqD checkpoint (--seqd)");
  const auto rcd = load_model(run, c.paths.target, "RCD checkpoint (--target)");
  const auto ref = load_model(run, c.paths.ref, "reference checkpoint (--ref)");
  const auto tasks = held_out_tasks(run);
  const auto points = pareto_sweep(seqd, rcd, &ref, tasks, c.eval.thresholds, c.decode, c.eval.num_blocks);
  for (const auto& p : points) {
    if (p.committed_sum != p.total_tokens) {
      throw std::runtime_error("token accounting mismatch at " + p.variant + " threshold " +
                               std::to_string(p.threshold));
    }
  }
  run.write("pareto.csv", pareto_csv(points));
}

void cmd_ablate_alpha(Run& run) {
  const auto& c = run.cfg;
  const auto rcd = load_model(run, c.paths.target, "RCD checkpoint (--target)");
  std::optional<DenoiserParams<float>> ref;
  if (c.decode.warm_start == WarmStart::Reference) ref = load_model(run, c.paths.ref, "reference checkpoint (--ref)");
  const auto tasks = held_out_tasks(run);
  std::vector<AlphaStrategy> strategies;
  for (const auto& s : c.eval.strategies) strategies.push_back(AlphaStrategy::parse(s));
  run.write("ablation.csv", ablation_csv(alpha_ablation(rcd, ref ? &*ref : nullptr, tasks, strategies, c.decode,
                                                        c.eval.num_blocks)));
}

void cmd_recall(Run& run) {
  const DecodeTrace trace = trace_from_ndjson(read_file_bytes(run.input(run.cfg.paths.trace, "trace (--trace)")));
  const auto finals = final_tokens(trace);
  std::vector<RecallCurve> curves;
  for (int k : run.cfg.eval.recall_k) curves.push_back(recall_at_k(trace, finals, k));
  run.write("recall.csv", recall_csv(curves));
}

using Command = void (*)(Run&);

const std::map<std::string, Command>& commands() {
  static const std::map<std::string, Command> table = {
      {"gen", cmd_gen},         {"train-ref", cmd_train_ref}, {"train-target", cmd_train_target},
      {"decode", cmd_decode},   {"sweep", cmd_sweep},         {"ablate-alpha", cmd_ablate_alpha},
      {"recall", cmd_recall}};
  return table;
}

Run execute(const std::string& name, const RunConfig& resolved) {
  Run run;
  run.cfg = resolved;
  run.out = resolved.paths.out;
  run.manifest.command = name;
  run.manifest.seed = resolved.seed;
  run.manifest.config = to_json(resolved);
  fs::create_directories(run.out);
  commands().at(name)(run);
  run.finish();
  return run;
}

RunConfig resolve(const Flags& flags) {
  RunConfig cfg = flags.config.empty() ? RunConfig{} : [&] {
    if (!fs::exists(flags.config)) {
      throw fs::filesystem_error("config not found", fs::path(flags.config),
                                 std::make_error_code(std::errc::no_such_file_or_directory));
    }
    return load_run_config(flags.config);
  }();
  try {
    cfg = merge_run_config(cfg, flag_overrides(flags));
    cfg.resolve();
  } catch (const DimensionMismatch&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

int replay(const std::string& manifest_path, const std::optional<std::string>& out) {
  const Manifest recorded = read_manifest(manifest_path);
  if (!commands().count(recorded.command)) throw ParseError("manifest names unknown command '" + recorded.command + "'");
  RunConfig cfg = merge_run_config(RunConfig{}, recorded.config);
  if (out) cfg.paths.out = *out;
  cfg.resolve();
  for (const auto& [path, hash] : recorded.inputs) {
    if (!fs::exists(path)) {
      throw fs::filesystem_error("replay input not found", fs::path(path),
                                 std::make_error_code(std::errc::no_such_file_or_directory));
    }
    if (sha256_file(path) != hash) std::cerr << "warning: input " << path << " changed since the recorded run\n";
  }
  const Run run = execute(recorded.command, cfg);
  int mismatches = 0;
  for (const auto& [name, hash] : recorded.outputs) {
    const auto it = run.manifest.outputs.find(name);
    const bool same = it != run.manifest.outputs.end() && it->second == hash;
    std::cout << (same ? "identical " : "DIFFERENT ") << name << '\n';
    if (!same) ++mismatches;
  }
  if (run.manifest.outputs.size() != recorded.outputs.size()) ++mismatches;
  if (mismatches) {
    std::cerr << "error[replay]: " << mismatches << " output(s) differ from the manifest\n";
    return kOther;
  }
  return kOk;
}

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON config file");
  sub->add_option("--seed", f.seed, "run seed");
  sub->add_option("--mode", f.mode, "seqd or rcd")->check(CLI::IsMember({"seqd", "rcd"}));
  sub->add_option("--threshold", f.threshold, "confidence threshold");
  sub->add_option("--top-m", f.top_m, "commit the m most confident slots per step");
  sub->add_option("--t-res", f.t_res, "residual temperature");
  sub->add_option("--alpha", f.alpha, "entropy | linear:c | confidence | inverse-entropy | inverse-confidence");
  sub->add_option("--warm-start", f.warm_start, "reference, self or none")
      ->check(CLI::IsMember({"reference", "self", "none"}));
  sub->add_option("--block-size", f.block_size, "block size (training and decoding)");
  sub->add_option("--epochs", f.epochs, "training epochs");
  sub->add_option("--out", f.out, "output directory");
  sub->add_option("--data", f.data, "training dataset");
  sub->add_option("--heldout", f.heldout, "held-out dataset / task set");
  sub->add_option("--ref", f.ref, "reference checkpoint");
  sub->add_option("--target", f.target, "target checkpoint");
  sub->add_option("--seqd", f.seqd, "SeqD control checkpoint");
  sub->add_option("--prompts", f.prompts, "prompt file, one per line");
  sub->add_option("--trace", f.trace, "trace.ndjson");
  sub->add_option("--kind", f.kind, "data / task kind: addition, markov or reverse")
      ->check(CLI::IsMember({"addition", "markov", "reverse"}));
  sub->add_option("--k", f.k, "recall widths")->delimiter(',');
}

int run_main(int argc, char** argv) {
  CLI::App app{"residual-context diffusion decoding toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));
  Flags flags;
  std::string manifest_path;
  std::optional<std::string> replay_out;

  std::map<CLI::App*, std::string> subs;
  const std::pair<const char*, const char*> described[] = {
      {"gen", "generate train/held-out corpora"},
      {"train-ref", "train the reference denoiser"},
      {"train-target", "train the target (--mode rcd) or a plain SeqD control (--mode seqd)"},
      {"decode", "decode prompts; writes generations and trace"},
      {"sweep", "threshold sweep for SeqD and RCD (pareto.csv)"},
      {"ablate-alpha", "alpha strategy ablation (ablation.csv)"},
      {"recall", "recall@k curves from a trace (recall.csv)"}};
  for (const auto& [name, help] : described) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common(sub, flags);
    subs[sub] = name;
  }
  CLI::App* rep = app.add_subcommand("replay", "rerun a command from its manifest and compare outputs");
  rep->add_option("manifest", manifest_path, "manifest.json")->required();
  rep->add_option("--out", replay_out, "output directory (default: the recorded one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  if (rep->parsed()) return replay(manifest_path, replay_out);
  for (const auto& [sub, name] : subs) {
    if (!sub->parsed()) continue;
    const Run run = execute(name, resolve(flags));
    std::cout << name << ": wrote " << run.manifest.outputs.size() << " file(s) + " << kManifestName << " to "
              << run.out.string() << '\n';
  }
  return kOk;
}

} // namespace

int main(int argc, char** argv) {
  try {
    return run_main(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error[usage]: " << e.what() << '\n';
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error[missing-file]: " << e.what() << '\n';
    return kMissing;
  } catch (const rcd::ParseError& e) {
    std::cerr << "error[parse]: " << e.what() << '\n';
    return kParse;
  } catch (const DimensionMismatch& e) {
    std::cerr << "error[dimension-mismatch]: " << e.what() << '\n';
    return kDims;
  } catch (const TrainingFailure& e) {
    std::cerr << "error[training-failure]: " << e.what() << " (step " << e.step() << ")\n";
    return kTrain;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
}
