#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "robumtl/common.hpp"
#include "robumtl/tensor.hpp"

namespace robumtl {

// All binary artifacts share a 16-byte little-endian header:
//   bytes 0..3   magic "RMTL"
//   bytes 4..15  three u32 fields, meaning depends on the file:
//     image/label files:   C, H, W           (raw f32 planes follow)
//     checkpoint/expert:   file type, record count, CRC-32 of the payload
inline constexpr char kMagic[4] = {'R', 'M', 'T', 'L'};
inline constexpr uint32_t kFileTypeCheckpoint = 2;
inline constexpr uint32_t kFileTypeExpert = 3;

uint32_t crc32(const void* data, size_t n, uint32_t seed = 0);

uint64_t file_fnv1a(const std::filesystem::path& path);

struct ImageData {
    int64_t c = 0, h = 0, w = 0;
    std::vector<float> data;  // C*H*W, planar
};

void write_image_file(const std::filesystem::path& path, const ImageData& img);
ImageData read_image_file(const std::filesystem::path& path);

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

// Named-tensor record stream: for each record
//   u32 name length, name bytes, u32 ndim, u32 dims[ndim], f32 data[prod]
void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

// Expert files carry a metadata block before the tensor records:
//   u8 kind, f32 alpha, u32 stage count S, u32 schedule[S], u8 squad flag
struct ExpertFileMeta {
    uint8_t kind = 0;
    float alpha = 1.0f;
    std::vector<uint32_t> schedule;
    bool has_squad = false;
};

void write_expert_file(const std::filesystem::path& path, const ExpertFileMeta& meta,
                       const std::vector<NamedTensor>& tensors);
std::pair<ExpertFileMeta, std::vector<NamedTensor>> read_expert_file(const std::filesystem::path& path);

}  // namespace robumtl
