#include "smd/dataset_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "smd/error.hpp"

namespace smd::io {
namespace {

static_assert(std::endian::native == std::endian::little,
              "grid files are little-endian; big-endian hosts need byte swapping");

constexpr char kMagic[4] = {'S', 'M', 'D', 'G'};
constexpr std::size_t kHeaderBytes = 16;
constexpr const char* kManifestHeader =
    "sample_id\tsubject_id\tsite_id\tview_index\tpath\theight\twidth";

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

int parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("manifest: bad integer '" + s + "' in column " + what);
  }
}

}  // namespace

std::vector<unsigned char> encode_grid(const GridFile& grid) {
  const std::size_t n = static_cast<std::size_t>(grid.height) * grid.width * grid.channels;
  if (grid.values.size() != n) {
    throw ValidationError("grid has " + std::to_string(grid.values.size()) +
                          " values but header implies " + std::to_string(n));
  }
  std::vector<unsigned char> out;
  out.reserve(kHeaderBytes + n * 4);
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, grid.height);
  put_u32(out, grid.width);
  put_u32(out, grid.channels);
  const std::size_t offset = out.size();
  out.resize(offset + n * 4);
  std::memcpy(out.data() + offset, grid.values.data(), n * 4);
  return out;
}

GridFile decode_grid(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < kHeaderBytes) throw IoError("truncated header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw IoError("bad magic");
  GridFile g;
  g.height = get_u32(bytes.data() + 4);
  g.width = get_u32(bytes.data() + 8);
  g.channels = get_u32(bytes.data() + 12);
  const std::uint64_t expected =
      static_cast<std::uint64_t>(g.height) * g.width * g.channels * 4ULL;
  const std::uint64_t payload = bytes.size() - kHeaderBytes;
  if (payload < expected) {
    throw IoError("truncated payload: expected " + std::to_string(expected) + " bytes, found " +
                  std::to_string(payload));
  }
  if (payload > expected) {
    throw IoError("payload length mismatch: expected " + std::to_string(expected) +
                  " bytes, found " + std::to_string(payload));
  }
  g.values.resize(expected / 4);
  std::memcpy(g.values.data(), bytes.data() + kHeaderBytes, expected);
  return g;
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_bytes(path, text.data(), text.size());
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return {bytes.begin(), bytes.end()};
}

void write_grid(const std::filesystem::path& path, const GridFile& grid) {
  const auto bytes = encode_grid(grid);
  write_bytes(path, bytes.data(), bytes.size());
}

GridFile read_grid(const std::filesystem::path& path) {
  try {
    return decode_grid(read_bytes(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_image(const std::filesystem::path& path, const ImageGrid& image) {
  GridFile g;
  g.height = static_cast<std::uint32_t>(image.height);
  g.width = static_cast<std::uint32_t>(image.width);
  g.channels = 1;
  g.values = image.pixels;
  write_grid(path, g);
}

ImageGrid read_image(const std::filesystem::path& path) {
  GridFile g = read_grid(path);
  if (g.channels != 1) throw IoError(path.string() + ": expected a single-channel grid");
  ImageGrid img;
  img.height = static_cast<int>(g.height);
  img.width = static_cast<int>(g.width);
  img.pixels = std::move(g.values);
  return img;
}

void write_pgm(const std::filesystem::path& path, const ImageGrid& image) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                    "\n255\n";
  for (float v : image.pixels) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0f))));
  }
  write_text(path, out);
}

std::string manifest_to_tsv(const datagen::DatasetManifest& manifest) {
  std::ostringstream out;
  out << "# smd-dataset format_version=" << manifest.format_version << "\n";
  out << kManifestHeader << "\n";
  for (const auto& r : manifest.records) {
    out << r.sample_id << '\t' << r.subject_id << '\t' << r.site_id << '\t' << r.view_index
        << '\t' << r.file_path << '\t' << r.height << '\t' << r.width << '\n';
  }
  return out.str();
}

datagen::DatasetManifest manifest_from_tsv(const std::string& text) {
  datagen::DatasetManifest m;
  std::istringstream in(text);
  std::string line;
  bool have_version = false;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '#') {
      const auto pos = line.find("format_version=");
      if (pos != std::string::npos) {
        m.format_version = parse_int(line.substr(pos + 15), "format_version");
        have_version = true;
      }
      continue;
    }
    if (!have_header) {
      if (line != kManifestHeader) throw ValidationError("manifest: unexpected column header");
      have_header = true;
      continue;
    }
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, '\t')) cols.push_back(c);
    if (cols.size() != 7) {
      throw ValidationError("manifest: expected 7 columns, found " + std::to_string(cols.size()));
    }
    datagen::ManifestRecord r;
    r.sample_id = cols[0];
    r.subject_id = cols[1];
    r.site_id = parse_int(cols[2], "site_id");
    r.view_index = parse_int(cols[3], "view_index");
    r.file_path = cols[4];
    r.height = parse_int(cols[5], "height");
    r.width = parse_int(cols[6], "width");
    m.records.push_back(std::move(r));
  }
  if (!have_version) throw ValidationError("manifest: missing format_version line");
  if (m.format_version != 1) {
    throw ValidationError("manifest: unsupported format_version " +
                          std::to_string(m.format_version));
  }
  if (!have_header) throw ValidationError("manifest: missing column header");
  return m;
}

void write_dataset(const datagen::Dataset& dataset, const std::filesystem::path& directory) {
  const auto& m = dataset.manifest;
  datagen::validate(m);
  if (dataset.grids.size() != m.records.size()) {
    throw ValidationError("dataset has " + std::to_string(dataset.grids.size()) +
                          " grids for " + std::to_string(m.records.size()) + " records");
  }
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) throw IoError("cannot create " + directory.string() + ": " + ec.message());
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    const auto& g = dataset.grids[i];
    if (g.height != r.height || g.width != r.width) {
      throw ValidationError("sample '" + r.sample_id + "': grid size disagrees with record");
    }
    const auto path = directory / r.file_path;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string());
    write_image(path, g);
  }
  write_text(directory / "manifest.tsv", manifest_to_tsv(m));
}

datagen::Dataset read_dataset(const std::filesystem::path& directory) {
  const auto manifest_path = directory / "manifest.tsv";
  if (!std::filesystem::exists(manifest_path)) {
    throw IoError("dataset not found: " + manifest_path.string() + " does not exist");
  }
  datagen::Dataset d;
  d.manifest = manifest_from_tsv(read_text(manifest_path));
  datagen::validate(d.manifest);
  d.grids.reserve(d.manifest.records.size());
  for (const auto& r : d.manifest.records) {
    ImageGrid g = read_image(directory / r.file_path);
    if (g.height != r.height || g.width != r.width) {
      throw IoError("sample '" + r.sample_id + "': file header " + std::to_string(g.height) +
                    "x" + std::to_string(g.width) + " does not match manifest");
    }
    d.grids.push_back(std::move(g));
  }
  return d;
}

}  // namespace smd::io
