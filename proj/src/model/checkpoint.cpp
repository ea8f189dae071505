#include "looplab/model/checkpoint.hpp"

#include "looplab/errors.hpp"
#include "looplab/io/tensor_file.hpp"

namespace looplab::model {

namespace {

ModelConfig config_from_header(const nlohmann::json& header, const std::filesystem::path& path) {
    if (header.value("kind", "") != "model")
        throw ValidationError("'" + path.string() + "' is not a model checkpoint");
    ModelConfig c = header.at("model").get<ModelConfig>();
    c.validate();
    return c;
}

} // namespace

template <std::floating_point Real>
void save_checkpoint(const std::filesystem::path& path, const LoopedModel<Real>& model) {
    io::write_tensor_file<Real>(path, {{"kind", "model"}, {"model", model.config}}, model.params.tensors);
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
    return config_from_header(io::read_tensor_file_header(path), path);
}

template <std::floating_point Real>
LoopedModel<Real> load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
    auto file = io::read_tensor_file<Real>(path);
    LoopedModel<Real> m;
    m.config = config_from_header(file.header, path);
    if (expected && !(*expected == m.config)) {
        throw ValidationError("checkpoint '" + path.string() + "' was written for model " +
                              nlohmann::json(m.config).dump() + " but the config asks for " +
                              nlohmann::json(*expected).dump());
    }
    const auto specs = parameter_specs(m.config);
    for (const auto& [name, spec] : specs) {
        auto it = file.tensors.find(name);
        if (it == file.tensors.end())
            throw ValidationError("checkpoint '" + path.string() + "' lacks parameter '" + name + "'");
        if (it->second.shape != spec.shape)
            throw ValidationError("checkpoint parameter '" + name + "' has shape " +
                                  ad::shape_string(it->second.shape) + ", config implies " +
                                  ad::shape_string(spec.shape));
        if (!ad::all_finite(it->second))
            throw ValidationError("checkpoint parameter '" + name + "' holds non-finite values");
    }
    for (const auto& [name, _] : file.tensors)
        if (!specs.contains(name))
            throw ValidationError("checkpoint '" + path.string() + "' has unexpected tensor '" + name + "'");
    m.params.tensors = std::move(file.tensors);
    return m;
}

template void save_checkpoint<float>(const std::filesystem::path&, const LoopedModel<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const LoopedModel<double>&);
template LoopedModel<float> load_checkpoint<float>(const std::filesystem::path&, const std::optional<ModelConfig>&);
template LoopedModel<double> load_checkpoint<double>(const std::filesystem::path&, const std::optional<ModelConfig>&);

} // namespace looplab::model
