#pragma once

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "looplab/autodiff/tensor.hpp"

namespace looplab::io {

inline constexpr std::uint32_t kTensorFileVersion = 1;

// Binary container: magic, format version, a JSON header, then named tensors
// as (name, dtype width, shape, little-endian payload). Tensors stored at
// either width load into either precision.
template <std::floating_point Real>
struct TensorFile {
    nlohmann::json header;
    std::map<std::string, ad::Tensor<Real>> tensors;
};

template <std::floating_point Real>
void write_tensor_file(const std::filesystem::path& path, const nlohmann::json& header,
                       const std::map<std::string, ad::Tensor<Real>>& tensors);

// Throws IoError on unreadable or truncated files, ValidationError on a
// foreign magic or version mismatch.
template <std::floating_point Real>
TensorFile<Real> read_tensor_file(const std::filesystem::path& path);

// Header only, without decoding payloads.
nlohmann::json read_tensor_file_header(const std::filesystem::path& path);

} // namespace looplab::io
