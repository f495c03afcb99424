#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace zal3d {

struct NamedTensor {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;

    std::size_t element_count() const;
};

inline constexpr std::uint32_t kTensorFileVersion = 1;

/// magic (4 bytes), u32 version, then per tensor: u16 name length, name,
/// u8 rank, u32 dims[rank], f32 payload. Tensors run to end of file.
void save_tensors(const std::filesystem::path& path, std::string_view magic, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path, std::string_view magic);

/// Throws FormatError when `name` is missing.
const NamedTensor& find_tensor(std::span<const NamedTensor> tensors, const std::string& name);

}  // namespace zal3d
