#include "rcd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace rcd {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  std::string text(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string format_meta(const ModelDims& d, std::size_t tensors) {
  std::ostringstream os;
  os << "format=" << kCheckpointFormat << " vocab=" << d.vocab << " dim=" << d.dim
     << " layers=" << d.layers << " heads=" << d.heads << " ff=" << d.ff << " max_len=" << d.max_len
     << " tensors=" << tensors;
  return os.str();
}

std::map<std::string, long> parse_meta(const std::string& meta) {
  std::map<std::string, long> kv;
  std::istringstream is(meta);
  std::string item;
  while (is >> item) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ParseError("bad checkpoint metadata item '" + item + "'");
    try {
      kv[item.substr(0, eq)] = std::stol(item.substr(eq + 1));
    } catch (const std::exception&) {
      throw ParseError("bad checkpoint metadata value '" + item + "'");
    }
  }
  for (const char* key : {"format", "vocab", "dim", "layers", "heads", "ff", "max_len", "tensors"}) {
    if (!kv.count(key)) throw ParseError(std::string("checkpoint metadata missing ") + key);
  }
  if (kv["format"] != kCheckpointFormat) {
    throw ParseError("unsupported checkpoint format " + std::to_string(kv["format"]));
  }
  return kv;
}

ModelDims dims_from_meta(std::map<std::string, long>& kv) {
  ModelDims d;
  d.vocab = static_cast<int>(kv["vocab"]);
  d.dim = static_cast<int>(kv["dim"]);
  d.layers = static_cast<int>(kv["layers"]);
  d.heads = static_cast<int>(kv["heads"]);
  d.ff = static_cast<int>(kv["ff"]);
  d.max_len = static_cast<int>(kv["max_len"]);
  try {
    d.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(std::string("checkpoint dims invalid: ") + e.what());
  }
  return d;
}

} // namespace

template <class S> std::string serialize_checkpoint(const DenoiserParams<S>& params) {
  std::size_t count = 0;
  visit_tensors(params, [&](const std::string&, const auto&) { ++count; });
  std::string out;
  const std::string meta = format_meta(params.dims, count);
  put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  visit_tensors(params, [&](const std::string& name, const auto& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    const bool is_vector = std::decay_t<decltype(t)>::ColsAtCompileTime == 1;
    if (is_vector) {
      put_u32(out, 1);
      put_u32(out, static_cast<std::uint32_t>(t.size()));
    } else {
      put_u32(out, 2);
      put_u32(out, static_cast<std::uint32_t>(t.rows()));
      put_u32(out, static_cast<std::uint32_t>(t.cols()));
    }
    // Mat<S> is row-major, so data() is already in file order.
    for (Index i = 0; i < t.size(); ++i) put_f32(out, static_cast<float>(t.data()[i]));
  });
  return out;
}

template <class S> DenoiserParams<S> deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  const std::uint32_t meta_len = in.u32();
  auto kv = parse_meta(in.text(meta_len));
  auto params = zeros_like<S>(dims_from_meta(kv));
  std::size_t expected = 0;
  visit_tensors(params, [&](const std::string&, const auto&) { ++expected; });
  if (static_cast<std::size_t>(kv["tensors"]) != expected) {
    throw ParseError("checkpoint tensor count " + std::to_string(kv["tensors"]) + " != expected " +
                     std::to_string(expected));
  }
  visit_tensors(params, [&](const std::string& name, auto& t) {
    const std::string got = in.text(in.u32());
    if (got != name) throw ParseError("expected tensor '" + name + "', found '" + got + "'");
    const std::uint32_t rank = in.u32();
    std::size_t numel = 1;
    std::vector<std::uint32_t> dims(rank);
    for (auto& d : dims) {
      d = in.u32();
      numel *= d;
    }
    const bool is_vector = std::decay_t<decltype(t)>::ColsAtCompileTime == 1;
    const bool shape_ok = is_vector ? (rank == 1 && dims[0] == t.size())
                                    : (rank == 2 && dims[0] == t.rows() && dims[1] == t.cols());
    if (!shape_ok || numel != static_cast<std::size_t>(t.size())) {
      throw ParseError("tensor '" + name + "' has unexpected shape");
    }
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(in.f32());
  });
  if (!in.done()) throw ParseError("trailing bytes after last checkpoint tensor");
  return params;
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::filesystem::filesystem_error("cannot open", path, std::make_error_code(std::errc::no_such_file_or_directory));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <class S> void save_checkpoint(const DenoiserParams<S>& params, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_checkpoint(params));
}

template <class S> DenoiserParams<S> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint<S>(read_file_bytes(path));
}

ModelDims read_checkpoint_dims(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  Reader in(bytes);
  const std::uint32_t meta_len = in.u32();
  auto kv = parse_meta(in.text(meta_len));
  return dims_from_meta(kv);
}

template std::string serialize_checkpoint<float>(const DenoiserParams<float>&);
template std::string serialize_checkpoint<double>(const DenoiserParams<double>&);
template DenoiserParams<float> deserialize_checkpoint<float>(const std::string&);
template DenoiserParams<double> deserialize_checkpoint<double>(const std::string&);
template void save_checkpoint<float>(const DenoiserParams<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const DenoiserParams<double>&, const std::filesystem::path&);
template DenoiserParams<float> load_checkpoint<float>(const std::filesystem::path&);
template DenoiserParams<double> load_checkpoint<double>(const std::filesystem::path&);

} // namespace rcd
