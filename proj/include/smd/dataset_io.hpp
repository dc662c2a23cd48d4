#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "smd/datagen.hpp"
#include "smd/image.hpp"

namespace smd::io {

// SMDG grid file: 16-byte header ("SMDG", u32 H, u32 W, u32 C, little-endian)
// followed by H*W*C little-endian float32 values, row-major, channel-last.
struct GridFile {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 1;
  std::vector<float> values;

  bool operator==(const GridFile&) const = default;
};

std::vector<unsigned char> encode_grid(const GridFile& grid);
GridFile decode_grid(const std::vector<unsigned char>& bytes);

void write_grid(const std::filesystem::path& path, const GridFile& grid);
GridFile read_grid(const std::filesystem::path& path);

void write_image(const std::filesystem::path& path, const ImageGrid& image);
ImageGrid read_image(const std::filesystem::path& path);

// Binary 8-bit PGM, intensities scaled from [0, 1].
void write_pgm(const std::filesystem::path& path, const ImageGrid& image);

std::string manifest_to_tsv(const datagen::DatasetManifest& manifest);
datagen::DatasetManifest manifest_from_tsv(const std::string& text);

// <dir>/manifest.tsv plus one grid file per record at its relative path.
void write_dataset(const datagen::Dataset& dataset, const std::filesystem::path& directory);
datagen::Dataset read_dataset(const std::filesystem::path& directory);

// Whole-file helpers that throw IoError.
std::vector<unsigned char> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const void* data, std::size_t size);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace smd::io
