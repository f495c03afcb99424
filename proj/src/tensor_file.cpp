#include "zal3d/tensor_file.hpp"

#include <limits>

#include "zal3d/binary_io.hpp"

namespace zal3d {

std::size_t NamedTensor::element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

void save_tensors(const std::filesystem::path& path, std::string_view magic, std::span<const NamedTensor> tensors) {
    io::Writer w;
    w.magic(magic);
    w.u32(kTensorFileVersion);
    for (const auto& t : tensors) {
        if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) throw ArgumentError("tensor name too long");
        if (t.dims.size() > 255) throw ArgumentError("tensor rank too large: " + t.name);
        if (t.element_count() != t.data.size()) throw ArgumentError("tensor payload does not match dims: " + t.name);
        w.u16(static_cast<std::uint16_t>(t.name.size()));
        w.magic(t.name);
        w.u8(static_cast<std::uint8_t>(t.dims.size()));
        for (auto d : t.dims) w.u32(d);
        w.f32s(t.data);
    }
    w.write_file(path);
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path, std::string_view magic) {
    io::Reader r(path);
    r.expect_magic(magic);
    const auto version = r.u32();
    if (version != kTensorFileVersion)
        throw FormatError(r.name() + ": unsupported version " + std::to_string(version));
    std::vector<NamedTensor> out;
    while (!r.at_end()) {
        NamedTensor t;
        t.name = r.str(r.u16());
        const auto rank = r.u8();
        for (std::uint8_t i = 0; i < rank; ++i) t.dims.push_back(r.u32());
        const std::size_t n = t.element_count();
        if (n * 4 > r.remaining()) throw IoError(r.name() + ": truncated payload");
        t.data = r.f32s(n);
        out.push_back(std::move(t));
    }
    return out;
}

const NamedTensor& find_tensor(std::span<const NamedTensor> tensors, const std::string& name) {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw FormatError("missing tensor '" + name + "'");
}

}  // namespace zal3d
