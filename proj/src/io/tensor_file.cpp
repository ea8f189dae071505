#include <algorithm>
#include <array>
#include "looplab/io/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "looplab/errors.hpp"

namespace looplab::io {

namespace {

constexpr char kMagic[8] = {'L', 'O', 'O', 'P', 'L', 'A', 'B', '\0'};

template <class T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    }
    return v;
}

class Writer {
public:
    explicit Writer(const std::filesystem::path& p) : path_(p), out_(p, std::ios::binary | std::ios::trunc) {
        if (!out_) throw IoError("cannot open '" + p.string() + "' for writing");
    }
    void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), std::streamsize(n)); }
    template <class T>
    void scalar(T v) {
        v = to_little(v);
        bytes(&v, sizeof v);
    }
    void string(const std::string& s) {
        scalar<std::uint64_t>(s.size());
        bytes(s.data(), s.size());
    }
    void finish() {
        out_.flush();
        if (!out_) throw IoError("write to '" + path_.string() + "' failed");
    }

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& p) : path_(p), in_(p, std::ios::binary) {
        if (!in_) throw IoError("cannot open '" + p.string() + "' for reading");
    }
    void bytes(void* data, std::size_t n) {
        in_.read(static_cast<char*>(data), std::streamsize(n));
        if (!in_) throw IoError("'" + path_.string() + "' is truncated");
    }
    template <class T>
    T scalar() {
        T v;
        bytes(&v, sizeof v);
        return to_little(v);
    }
    std::string string(std::size_t limit) {
        auto n = scalar<std::uint64_t>();
        if (n > limit) throw IoError("'" + path_.string() + "' has an implausible string length");
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    std::ifstream in_;
};

nlohmann::json read_preamble(Reader& r) {
    char magic[8];
    r.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw ValidationError("'" + r.path().string() + "' is not a looplab tensor file");
    const auto version = r.scalar<std::uint32_t>();
    if (version != kTensorFileVersion)
        throw ValidationError("'" + r.path().string() + "' has format version " + std::to_string(version) +
                              ", expected " + std::to_string(kTensorFileVersion));
    try {
        return nlohmann::json::parse(r.string(std::size_t(1) << 24));
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("'" + r.path().string() + "' has a corrupt header: " + e.what());
    }
}

template <class Stored, class Real>
void read_payload(Reader& r, std::vector<Real>& out) {
    std::vector<Stored> raw(out.size());
    r.bytes(raw.data(), raw.size() * sizeof(Stored));
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = Real(to_little(raw[i]));
}

} // namespace

template <std::floating_point Real>
void write_tensor_file(const std::filesystem::path& path, const nlohmann::json& header,
                       const std::map<std::string, ad::Tensor<Real>>& tensors) {
    Writer w(path);
    w.bytes(kMagic, sizeof kMagic);
    w.scalar<std::uint32_t>(kTensorFileVersion);
    w.string(header.dump());
    w.scalar<std::uint64_t>(tensors.size());
    for (const auto& [name, t] : tensors) {
        w.string(name);
        w.scalar<std::uint8_t>(sizeof(Real));
        w.scalar<std::uint64_t>(t.shape.size());
        for (auto d : t.shape) w.scalar<std::uint64_t>(d);
        for (Real x : t.data) w.scalar<Real>(x);
    }
    w.finish();
}

template <std::floating_point Real>
TensorFile<Real> read_tensor_file(const std::filesystem::path& path) {
    Reader r(path);
    TensorFile<Real> f;
    f.header = read_preamble(r);
    const auto count = r.scalar<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.string(4096);
        const auto width = r.scalar<std::uint8_t>();
        const auto rank = r.scalar<std::uint64_t>();
        if (rank > 8) throw IoError("'" + path.string() + "': tensor '" + name + "' has rank " + std::to_string(rank));
        ad::Shape shape(rank);
        for (auto& d : shape) d = r.scalar<std::uint64_t>();
        ad::Tensor<Real> t = ad::Tensor<Real>::zeros(shape);
        if (width == 4)
            read_payload<float>(r, t.data);
        else if (width == 8)
            read_payload<double>(r, t.data);
        else
            throw ValidationError("'" + path.string() + "': tensor '" + name + "' has unsupported width " +
                                  std::to_string(width));
        f.tensors.emplace(std::move(name), std::move(t));
    }
    return f;
}

nlohmann::json read_tensor_file_header(const std::filesystem::path& path) {
    Reader r(path);
    return read_preamble(r);
}

template void write_tensor_file<float>(const std::filesystem::path&, const nlohmann::json&,
                                       const std::map<std::string, ad::Tensor<float>>&);
template void write_tensor_file<double>(const std::filesystem::path&, const nlohmann::json&,
                                        const std::map<std::string, ad::Tensor<double>>&);
template TensorFile<float> read_tensor_file<float>(const std::filesystem::path&);
template TensorFile<double> read_tensor_file<double>(const std::filesystem::path&);

} // namespace looplab::io
