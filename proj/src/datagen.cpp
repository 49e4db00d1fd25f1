#include "rcd/datagen.hpp"

#include "json.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "rcd/checkpoint.hpp"

namespace rcd {

namespace {

using json = nlohmann::json;

// Byte length of the UTF-8 sequence starting with `lead`.
std::size_t utf8_len(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 1;
}

long pow10(int n) {
  long v = 1;
  for (int i = 0; i < n; ++i) v *= 10;
  return v;
}

int sample_categorical(const Eigen::Ref<const Vec<double>>& probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0;
  for (Index i = 0; i < probs.size(); ++i) {
    acc += probs(i);
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size() - 1);
}

} // namespace

Tokenizer::Tokenizer() {
  symbols_ = {"_", "␄"};
  for (char c = '0'; c <= '9'; ++c) symbols_.emplace_back(1, c);
  for (char c = 'a'; c <= 'z'; ++c) symbols_.emplace_back(1, c);
  for (char c : std::string(" +-*/=()[]<>,.;:?!'\"|^&%#@")) symbols_.emplace_back(1, c);
  for (std::size_t i = 0; i < symbols_.size(); ++i) index_[symbols_[i]] = static_cast<int>(i);
}

int Tokenizer::id(std::string_view symbol) const {
  auto it = index_.find(std::string(symbol));
  if (it == index_.end()) throw std::invalid_argument("unknown symbol '" + std::string(symbol) + "'");
  return it->second;
}

const std::string& Tokenizer::symbol(int id) const {
  static const std::string mask = "[M]";
  if (id == mask_id()) return mask;
  if (id < 0 || id > mask_id()) throw std::invalid_argument("token id " + std::to_string(id) + " outside vocabulary");
  return symbols_[static_cast<std::size_t>(id)];
}

TokenSeq Tokenizer::encode(std::string_view text) const {
  TokenSeq ids;
  std::size_t i = 0;
  std::size_t position = 0;
  while (i < text.size()) {
    const std::size_t n = std::min(utf8_len(static_cast<unsigned char>(text[i])), text.size() - i);
    const std::string sym(text.substr(i, n));
    auto it = index_.find(sym);
    if (it == index_.end()) {
      throw std::invalid_argument("unknown symbol '" + sym + "' at position " + std::to_string(position));
    }
    ids.push_back(it->second);
    i += n;
    ++position;
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) out += symbol(id);
  return out;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ostringstream os;
  json header = {{"tokenizer", data.tokenizer}, {"V", data.vocab}, {"records", data.records.size()}};
  os << header.dump() << '\n';
  for (const auto& rec : data.records) {
    for (std::size_t i = 0; i < rec.size(); ++i) {
      if (i) os << ' ';
      os << rec[i];
    }
    os << '\n';
  }
  write_file_bytes(path, os.str());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::istringstream in(read_file_bytes(path));
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty dataset file");
  Dataset data;
  std::size_t expected = 0;
  try {
    const json header = json::parse(line);
    data.tokenizer = header.at("tokenizer").get<std::string>();
    data.vocab = header.at("V").get<int>();
    expected = header.at("records").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": bad dataset header: " + e.what());
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    TokenSeq rec;
    std::istringstream ls(line);
    std::string field;
    while (ls >> field) {
      std::size_t used = 0;
      int v = -1;
      try {
        v = std::stoi(field, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != field.size() || v < 0 || v >= data.vocab) {
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": bad token id '" + field + "'");
      }
      rec.push_back(v);
    }
    data.records.push_back(std::move(rec));
  }
  if (data.records.size() != expected) {
    throw ParseError(path.string() + ": header declares " + std::to_string(expected) + " records, found " +
                     std::to_string(data.records.size()));
  }
  return data;
}

void MarkovSpec::validate() const {
  if (states < 2) throw std::invalid_argument("markov chain needs at least 2 states");
  if (transition.rows() != states || transition.cols() != states || initial.size() != states) {
    throw std::invalid_argument("markov spec shapes do not match state count");
  }
  for (Index r = 0; r < states; ++r) {
    if ((transition.row(r).array() < 0).any() || !all_finite(transition.row(r))) {
      throw std::invalid_argument("transition row " + std::to_string(r) + " has negative entries");
    }
    if (std::abs(transition.row(r).sum() - 1.0) > 1e-9) {
      throw std::invalid_argument("transition row " + std::to_string(r) + " does not sum to 1");
    }
  }
  if ((initial.array() < 0).any() || std::abs(initial.sum() - 1.0) > 1e-9) {
    throw std::invalid_argument("initial distribution is not stochastic");
  }
  if (states > 26) throw std::invalid_argument("markov chain limited to 26 states");
}

int markov_token(int state) { return Tokenizer().id(std::string(1, static_cast<char>('a' + state))); }

std::optional<int> markov_state(int token) {
  const int first = markov_token(0);
  if (token >= first && token < first + 26) return token - first;
  return std::nullopt;
}

Dataset gen_markov_corpus(const MarkovSpec& spec, int num_blocks, int block_len) {
  spec.validate();
  if (num_blocks < 0 || block_len < 1) throw std::invalid_argument("bad corpus size");
  Rng rng = make_rng(spec.seed, "data");
  Dataset data;
  data.records.reserve(num_blocks);
  for (int b = 0; b < num_blocks; ++b) {
    TokenSeq rec(block_len);
    int s = sample_categorical(spec.initial, rng);
    for (int i = 0; i < block_len; ++i) {
      if (i > 0) s = sample_categorical(spec.transition.row(s).transpose(), rng);
      rec[i] = markov_token(s);
    }
    data.records.push_back(std::move(rec));
  }
  return data;
}

std::filesystem::path markov_sidecar(const std::filesystem::path& dataset_path) {
  return dataset_path.string() + ".markov.json";
}

void save_markov_spec(const MarkovSpec& spec, const std::filesystem::path& path) {
  spec.validate();
  json t = json::array();
  for (Index r = 0; r < spec.states; ++r) {
    json row = json::array();
    for (Index c = 0; c < spec.states; ++c) row.push_back(spec.transition(r, c));
    t.push_back(row);
  }
  json init = json::array();
  for (Index i = 0; i < spec.states; ++i) init.push_back(spec.initial(i));
  json j = {{"states", spec.states}, {"transition", t}, {"initial", init}, {"seed", spec.seed}};
  write_file_bytes(path, j.dump(2) + "\n");
}

MarkovSpec load_markov_spec(const std::filesystem::path& path) {
  MarkovSpec spec;
  try {
    const json j = json::parse(read_file_bytes(path));
    spec.states = j.at("states").get<int>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.transition.resize(spec.states, spec.states);
    spec.initial.resize(spec.states);
    for (int r = 0; r < spec.states; ++r) {
      spec.initial(r) = j.at("initial").at(r).get<double>();
      for (int c = 0; c < spec.states; ++c) spec.transition(r, c) = j.at("transition").at(r).at(c).get<double>();
    }
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": bad markov spec: " + e.what());
  }
  spec.validate();
  return spec;
}

std::string addition_text(long a, long b, bool with_cot) {
  std::string out = std::to_string(a) + "+" + std::to_string(b) + "=";
  if (with_cot) {
    const std::string sa = std::to_string(a), sb = std::to_string(b);
    const std::size_t cols = std::max(sa.size(), sb.size());
    int carry = 0;
    for (std::size_t i = 0; i < cols; ++i) {
      const int x = i < sa.size() ? sa[sa.size() - 1 - i] - '0' : 0;
      const int y = i < sb.size() ? sb[sb.size() - 1 - i] - '0' : 0;
      const int s = x + y + carry;
      if (i) out += ",";
      out += std::to_string(x) + "+" + std::to_string(y) + "+" + std::to_string(carry) + "=" + std::to_string(s);
      carry = s / 10;
    }
    out += "=";
  }
  out += std::to_string(a + b) + "␄";
  return out;
}

Dataset gen_addition_corpus(const AdditionConfig& config) {
  if (config.min_digits < 1 || config.max_digits > 6 || config.min_digits > config.max_digits) {
    throw std::invalid_argument("addition digit range must lie within [1, 6]");
  }
  if (config.count < 0) throw std::invalid_argument("negative record count");
  const Tokenizer tok;
  Rng rng = make_rng(config.seed, "data");
  auto operand = [&] {
    const int span = config.max_digits - config.min_digits + 1;
    const int d = config.min_digits + static_cast<int>(uniform_index(rng, span));
    const long lo = d == 1 ? 0 : pow10(d - 1);
    const long hi = pow10(d) - 1;
    return lo + static_cast<long>(uniform_index(rng, static_cast<std::uint64_t>(hi - lo + 1)));
  };
  Dataset data;
  data.vocab = tok.vocab();
  for (int i = 0; i < config.count; ++i) {
    const long a = operand();
    const long b = operand();
    data.records.push_back(tok.encode(addition_text(a, b, config.with_cot)));
  }
  return data;
}

Dataset gen_reverse_corpus(const ReverseConfig& config) {
  if (config.min_len < 1 || config.min_len > config.max_len) throw std::invalid_argument("bad reverse length range");
  if (config.count < 0) throw std::invalid_argument("negative record count");
  const Tokenizer tok;
  Rng rng = make_rng(config.seed, "data");
  Dataset data;
  data.vocab = tok.vocab();
  for (int i = 0; i < config.count; ++i) {
    const int len = config.min_len + static_cast<int>(uniform_index(rng, config.max_len - config.min_len + 1));
    std::string s;
    for (int j = 0; j < len; ++j) s.push_back(static_cast<char>('a' + uniform_index(rng, 26)));
    data.records.push_back(tok.encode(s + "=" + std::string(s.rbegin(), s.rend()) + "␄"));
  }
  return data;
}

std::optional<AdditionRecord> parse_addition(std::string_view text) {
  constexpr std::string_view eot = "␄";
  if (text.ends_with(eot)) text.remove_suffix(eot.size());
  const auto plus = text.find('+');
  const auto eq = text.find('=');
  const auto last_eq = text.rfind('=');
  if (plus == std::string_view::npos || eq == std::string_view::npos || plus > eq) return std::nullopt;
  auto num = [](std::string_view s) -> std::optional<long> {
    if (s.empty() || s.size() > 12) return std::nullopt;
    long v = 0;
    for (char c : s) {
      if (c < '0' || c > '9') return std::nullopt;
      v = v * 10 + (c - '0');
    }
    return v;
  };
  const auto a = num(text.substr(0, plus));
  const auto b = num(text.substr(plus + 1, eq - plus - 1));
  const auto c = num(text.substr(last_eq + 1));
  if (!a || !b || !c) return std::nullopt;
  return AdditionRecord{*a, *b, *c};
}

std::size_t prompt_length(const TokenSeq& record, int anchor) {
  for (std::size_t i = 0; i < record.size(); ++i) {
    if (record[i] == anchor) return i + 1;
  }
  return 0;
}

std::optional<std::string> extract_answer(const Tokenizer& tok, std::span<const int> ids) {
  std::size_t end = ids.size();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == Tokenizer::kEot) {
      end = i;
      break;
    }
  }
  const int zero = tok.id("0");
  auto is_digit = [&](int id) { return id >= zero && id < zero + 10; };
  std::size_t stop = end;
  while (stop > 0 && !is_digit(ids[stop - 1])) --stop;
  if (stop == 0) return std::nullopt;
  std::size_t start = stop;
  while (start > 0 && is_digit(ids[start - 1])) --start;
  std::string out;
  for (std::size_t i = start; i < stop; ++i) out.push_back(static_cast<char>('0' + (ids[i] - zero)));
  return out;
}

} // namespace rcd
