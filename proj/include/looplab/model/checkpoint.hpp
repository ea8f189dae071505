#pragma once

#include <filesystem>
#include <optional>

#include "looplab/model/looped_model.hpp"

namespace looplab::model {

template <std::floating_point Real>
void save_checkpoint(const std::filesystem::path& path, const LoopedModel<Real>& model);

// Validates every tensor name and shape against the stored config. When
// `expected` is given, the stored config must equal it (ValidationError
// otherwise), so mismatches surface before any compute.
template <std::floating_point Real>
LoopedModel<Real> load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<ModelConfig>& expected = std::nullopt);

ModelConfig read_checkpoint_config(const std::filesystem::path& path);

} // namespace looplab::model
