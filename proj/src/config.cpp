#include "rcd/config.hpp"

#include "rcd/checkpoint.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <iomanip>
#include <sstream>

namespace rcd {

MarkovSpec DataConfig::markov_spec(std::uint64_t seed) const {
  MarkovSpec spec;
  spec.states = states;
  if (transition.size() != static_cast<std::size_t>(states) || initial.size() != static_cast<std::size_t>(states)) {
    throw std::invalid_argument("markov transition / initial sizes do not match the state count");
  }
  spec.transition.resize(states, states);
  spec.initial.resize(states);
  for (int r = 0; r < states; ++r) {
    if (transition[r].size() != static_cast<std::size_t>(states)) {
      throw std::invalid_argument("markov transition row " + std::to_string(r) + " has the wrong length");
    }
    for (int c = 0; c < states; ++c) spec.transition(r, c) = transition[r][c];
    spec.initial(r) = initial[r];
  }
  spec.seed = seed;
  spec.validate();
  return spec;
}

void RunConfig::resolve() {
  train.seed = seed;
  decode.seed = seed;
  if (train.anchor == -1 && data.kind != "markov") train.anchor = Tokenizer().id("=");
  model.validate();
  ref_model.validate();
  if (ref_model.vocab != model.vocab) throw DimensionMismatch("reference and target vocabularies differ");
  train.validate();
  decode.validate();
  if (data.kind != "addition" && data.kind != "markov" && data.kind != "reverse") {
    throw std::invalid_argument("data kind must be addition, markov or reverse, got '" + data.kind + "'");
  }
  if (data.kind == "markov") (void)data.markov_spec(seed);
  for (const auto& s : eval.strategies) (void)AlphaStrategy::parse(s);
  if (eval.num_blocks < 1) throw std::invalid_argument("eval.num_blocks must be positive");
}

namespace {

Json dims_json(const ModelDims& d) {
  return Json{{"vocab", d.vocab}, {"dim", d.dim},       {"layers", d.layers},
              {"heads", d.heads}, {"ff", d.ff},         {"max_len", d.max_len}};
}

ModelDims dims_from(const Json& j) {
  ModelDims d;
  d.vocab = j.at("vocab").get<int>();
  d.dim = j.at("dim").get<int>();
  d.layers = j.at("layers").get<int>();
  d.heads = j.at("heads").get<int>();
  d.ff = j.at("ff").get<int>();
  d.max_len = j.at("max_len").get<int>();
  return d;
}

void overlay(Json& base, const Json& over, const std::string& where) {
  if (!over.is_object()) throw ParseError("config section '" + where + "' must be an object");
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ParseError("unknown config key '" + key + "'");
    Json& slot = base[it.key()];
    if (slot.is_object()) {
      overlay(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

} // namespace

Json to_json(const RunConfig& c) {
  const auto& t = c.train;
  const auto& d = c.decode;
  Json j;
  j["seed"] = c.seed;
  j["model"] = dims_json(c.model);
  j["ref_model"] = dims_json(c.ref_model);
  j["train"] = Json{{"lr", t.lr},
                    {"beta1", t.beta1},
                    {"beta2", t.beta2},
                    {"adam_eps", t.adam_eps},
                    {"weight_decay", t.weight_decay},
                    {"warmup_ratio", t.warmup_ratio},
                    {"grad_clip", t.grad_clip},
                    {"batch_size", t.batch_size},
                    {"epochs", t.epochs},
                    {"grad_accum", t.grad_accum},
                    {"t_min", t.t_min},
                    {"block_size", t.block_size},
                    {"anchor", t.anchor}};
  const bool top_m = std::holds_alternative<TopM>(d.selection);
  j["decode"] = Json{{"mode", to_string(d.mode)},
                     {"block_size", d.block_size},
                     {"max_steps", d.max_steps},
                     {"selection", top_m ? "top-m" : "threshold"},
                     {"threshold", top_m ? ConfidenceThreshold{}.threshold
                                         : std::get<ConfidenceThreshold>(d.selection).threshold},
                     {"top_m", top_m ? std::get<TopM>(d.selection).m : TopM{}.m},
                     {"sampling_temperature", d.sampling_temperature},
                     {"t_res", d.t_res},
                     {"alpha", d.alpha.str()},
                     {"warm_start", to_string(d.warm_start)},
                     {"scale_delta", d.scale_delta},
                     {"stop_token", d.stop_token}};
  const auto& g = c.data;
  j["data"] = Json{{"kind", g.kind},
                   {"min_digits", g.min_digits},
                   {"max_digits", g.max_digits},
                   {"train_count", g.train_count},
                   {"heldout_count", g.heldout_count},
                   {"with_cot", g.with_cot},
                   {"min_len", g.min_len},
                   {"max_len", g.max_len},
                   {"states", g.states},
                   {"transition", g.transition},
                   {"initial", g.initial},
                   {"train_blocks", g.train_blocks},
                   {"heldout_blocks", g.heldout_blocks},
                   {"block_len", g.block_len}};
  const auto& p = c.paths;
  j["paths"] = Json{{"data", p.data},       {"heldout", p.heldout}, {"ref", p.ref},
                    {"target", p.target},   {"seqd", p.seqd},       {"prompts", p.prompts},
                    {"trace", p.trace},     {"out", p.out}};
  const auto& e = c.eval;
  j["eval"] = Json{{"thresholds", e.thresholds},
                   {"strategies", e.strategies},
                   {"recall_k", e.recall_k},
                   {"num_blocks", e.num_blocks},
                   {"max_tasks", e.max_tasks}};
  return j;
}

RunConfig merge_run_config(const RunConfig& base, const Json& overrides) {
  Json j = to_json(base);
  overlay(j, overrides, "");
  RunConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.model = dims_from(j.at("model"));
    c.ref_model = dims_from(j.at("ref_model"));
    const Json& t = j.at("train");
    c.train.lr = t.at("lr").get<double>();
    c.train.beta1 = t.at("beta1").get<double>();
    c.train.beta2 = t.at("beta2").get<double>();
    c.train.adam_eps = t.at("adam_eps").get<double>();
    c.train.weight_decay = t.at("weight_decay").get<double>();
    c.train.warmup_ratio = t.at("warmup_ratio").get<double>();
    c.train.grad_clip = t.at("grad_clip").get<double>();
    c.train.batch_size = t.at("batch_size").get<int>();
    c.train.epochs = t.at("epochs").get<int>();
    c.train.grad_accum = t.at("grad_accum").get<int>();
    c.train.t_min = t.at("t_min").get<double>();
    c.train.block_size = t.at("block_size").get<int>();
    c.train.anchor = t.at("anchor").get<int>();
    const Json& d = j.at("decode");
    c.decode.mode = parse_mode(d.at("mode").get<std::string>());
    c.decode.block_size = d.at("block_size").get<int>();
    c.decode.max_steps = d.at("max_steps").get<int>();
    const std::string sel = d.at("selection").get<std::string>();
    if (sel == "top-m") {
      c.decode.selection = TopM{d.at("top_m").get<int>()};
    } else if (sel == "threshold") {
      c.decode.selection = ConfidenceThreshold{d.at("threshold").get<double>()};
    } else {
      throw ParseError("decode.selection must be 'threshold' or 'top-m'");
    }
    c.decode.sampling_temperature = d.at("sampling_temperature").get<double>();
    c.decode.t_res = d.at("t_res").get<double>();
    c.decode.alpha = AlphaStrategy::parse(d.at("alpha").get<std::string>());
    c.decode.warm_start = parse_warm_start(d.at("warm_start").get<std::string>());
    c.decode.scale_delta = d.at("scale_delta").get<bool>();
    c.decode.stop_token = d.at("stop_token").get<int>();
    const Json& g = j.at("data");
    c.data.kind = g.at("kind").get<std::string>();
    c.data.min_digits = g.at("min_digits").get<int>();
    c.data.max_digits = g.at("max_digits").get<int>();
    c.data.train_count = g.at("train_count").get<int>();
    c.data.heldout_count = g.at("heldout_count").get<int>();
    c.data.with_cot = g.at("with_cot").get<bool>();
    c.data.min_len = g.at("min_len").get<int>();
    c.data.max_len = g.at("max_len").get<int>();
    c.data.states = g.at("states").get<int>();
    c.data.transition = g.at("transition").get<std::vector<std::vector<double>>>();
    c.data.initial = g.at("initial").get<std::vector<double>>();
    c.data.train_blocks = g.at("train_blocks").get<int>();
    c.data.heldout_blocks = g.at("heldout_blocks").get<int>();
    c.data.block_len = g.at("block_len").get<int>();
    const Json& p = j.at("paths");
    c.paths.data = p.at("data").get<std::string>();
    c.paths.heldout = p.at("heldout").get<std::string>();
    c.paths.ref = p.at("ref").get<std::string>();
    c.paths.target = p.at("target").get<std::string>();
    c.paths.seqd = p.at("seqd").get<std::string>();
    c.paths.prompts = p.at("prompts").get<std::string>();
    c.paths.trace = p.at("trace").get<std::string>();
    c.paths.out = p.at("out").get<std::string>();
    const Json& e = j.at("eval");
    c.eval.thresholds = e.at("thresholds").get<std::vector<double>>();
    c.eval.strategies = e.at("strategies").get<std::vector<std::string>>();
    c.eval.recall_k = e.at("recall_k").get<std::vector<int>>();
    c.eval.num_blocks = e.at("num_blocks").get<int>();
    c.eval.max_tasks = e.at("max_tasks").get<int>();
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(std::string("config: ") + ex.what());
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(path.string() + ": " + ex.what());
  }
  return merge_run_config(RunConfig{}, j);
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file_bytes(path)); }

Json to_json(const Manifest& m) {
  Json j;
  j["tool"] = m.tool;
  j["version"] = m.version;
  j["command"] = m.command;
  j["args"] = m.args;
  j["seed"] = m.seed;
  j["config"] = m.config;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  return j;
}

Manifest manifest_from_json(const Json& j) {
  Manifest m;
  try {
    m.tool = j.at("tool").get<std::string>();
    m.version = j.at("version").get<std::string>();
    m.command = j.at("command").get<std::string>();
    m.args = j.at("args").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config = j.at("config");
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(std::string("manifest: ") + ex.what());
  }
  return m;
}

void write_manifest(const Manifest& m, const std::filesystem::path& dir) {
  write_file_bytes(dir / kManifestName, to_json(m).dump(2) + "\n");
}

Manifest read_manifest(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  try {
    return manifest_from_json(Json::parse(text));
  } catch (const nlohmann::json::parse_error& ex) {
    throw ParseError(path.string() + ": " + ex.what());
  }
}

} // namespace rcd
