#pragma once

// Binary checkpoint format (all integers little-endian u32):
//
//   meta_len, meta bytes   "format=1 vocab=V dim=D layers=L heads=H ff=F max_len=N tensors=T"
//   T times:  name_len, name bytes, rank, dims[rank], row-major f32 values
//
// Tensor order and names follow visit_tensors().

#include "rcd/model.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>

namespace rcd {

/// Malformed or truncated checkpoint / data file.
class ParseError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointFormat = 1;

template <class S> std::string serialize_checkpoint(const DenoiserParams<S>& params);
template <class S> DenoiserParams<S> deserialize_checkpoint(const std::string& bytes);

template <class S> void save_checkpoint(const DenoiserParams<S>& params, const std::filesystem::path& path);
template <class S> DenoiserParams<S> load_checkpoint(const std::filesystem::path& path);

/// Reads only the metadata record.
ModelDims read_checkpoint_dims(const std::filesystem::path& path);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::string& bytes);

} // namespace rcd
