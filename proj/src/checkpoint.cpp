#include "smd/checkpoint.hpp"

#include <cstring>
#include <sstream>

#include "smd/dataset_io.hpp"
#include "smd/error.hpp"

namespace smd::nets {
namespace {

struct TensorEntry {
  std::string name;
  std::vector<std::int64_t> shape;
  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

std::vector<std::pair<std::string, torch::Tensor>> named_tensors(const Networks& nets) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& [group, module] : nets.groups()) {
    for (const auto& p : module->named_parameters()) out.emplace_back(group + "." + p.key(), p.value());
    for (const auto& b : module->named_buffers()) out.emplace_back(group + "." + b.key(), b.value());
  }
  return out;
}

std::string next_line(std::istringstream& in, const char* what) {
  std::string line;
  if (!std::getline(in, line)) throw IoError(std::string("checkpoint: truncated at ") + what);
  return line;
}

KeyValueConfig read_section(std::istringstream& in, const std::string& keyword) {
  std::istringstream head(next_line(in, keyword.c_str()));
  std::string kw;
  std::size_t n = 0;
  head >> kw >> n;
  if (kw != keyword) throw IoError("checkpoint: expected section '" + keyword + "'");
  std::string text;
  for (std::size_t i = 0; i < n; ++i) text += next_line(in, keyword.c_str()) + "\n";
  return KeyValueConfig::parse(text);
}

void copy_payload(Networks& nets, const std::vector<TensorEntry>& entries, const char* data,
                  std::size_t size) {
  auto targets = named_tensors(nets);
  if (targets.size() != entries.size()) {
    throw ValidationError("checkpoint holds " + std::to_string(entries.size()) +
                          " tensors but the architecture has " + std::to_string(targets.size()));
  }
  std::size_t offset = 0;
  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    auto& [name, tensor] = targets[i];
    if (e.name != name) {
      throw ValidationError("checkpoint tensor '" + e.name + "' where architecture expects '" +
                            name + "'");
    }
    if (tensor.sizes().vec() != e.shape) {
      throw ValidationError("checkpoint tensor '" + e.name + "' has a shape incompatible with the architecture");
    }
    const std::size_t bytes = static_cast<std::size_t>(e.numel()) * sizeof(float);
    if (offset + bytes > size) throw IoError("checkpoint: truncated payload");
    auto src = torch::empty(e.shape, torch::kFloat32);
    std::memcpy(src.data_ptr<float>(), data + offset, bytes);
    tensor.copy_(src.to(tensor.scalar_type()));
    offset += bytes;
  }
  if (offset != size) throw IoError("checkpoint: payload length mismatch");
}

struct Parsed {
  NetConfig net;
  KeyValueConfig train;
  std::vector<TensorEntry> entries;
  std::size_t payload_offset = 0;
};

Parsed parse_header(const std::string& bytes) {
  const std::string marker = "\npayload\n";
  const auto pos = bytes.find(marker);
  if (bytes.rfind("SMDCKPT 1\n", 0) != 0) throw IoError("checkpoint: bad magic");
  if (pos == std::string::npos) throw IoError("checkpoint: missing payload marker");

  Parsed p;
  std::istringstream in(bytes.substr(0, pos + 1));
  next_line(in, "magic");
  p.net = net_config_from_kv(read_section(in, "net"));
  p.train = read_section(in, "train");

  std::istringstream head(next_line(in, "tensors"));
  std::string kw;
  std::size_t n = 0;
  head >> kw >> n;
  if (kw != "tensors") throw IoError("checkpoint: expected section 'tensors'");
  for (std::size_t i = 0; i < n; ++i) {
    std::istringstream line(next_line(in, "tensor index"));
    TensorEntry e;
    std::string dtype;
    std::size_t ndim = 0;
    line >> e.name >> dtype >> ndim;
    if (dtype != "f32") throw IoError("checkpoint: unsupported dtype '" + dtype + "'");
    for (std::size_t d = 0; d < ndim; ++d) {
      std::int64_t v = 0;
      line >> v;
      e.shape.push_back(v);
    }
    if (!line) throw IoError("checkpoint: malformed tensor index line");
    p.entries.push_back(std::move(e));
  }
  p.payload_offset = pos + marker.size();
  return p;
}

}  // namespace

KeyValueConfig net_config_to_kv(const NetConfig& cfg) {
  KeyValueConfig kv;
  kv.set("height", std::to_string(cfg.height));
  kv.set("width", std::to_string(cfg.width));
  kv.set("anatomy_channels", std::to_string(cfg.anatomy_channels));
  kv.set("anatomy_width", std::to_string(cfg.anatomy_width));
  kv.set("decoder_width", std::to_string(cfg.decoder_width));
  kv.set("contrast_width", std::to_string(cfg.contrast_width));
  kv.set("critic_width", std::to_string(cfg.critic_width));
  kv.set("leaky_slope", format_double(cfg.leaky_slope));
  return kv;
}

NetConfig net_config_from_kv(const KeyValueConfig& kv) {
  kv.reject_unknown({"height", "width", "anatomy_channels", "anatomy_width", "decoder_width",
                     "contrast_width", "critic_width", "leaky_slope"});
  NetConfig cfg;
  cfg.height = kv.get_int("height", cfg.height);
  cfg.width = kv.get_int("width", cfg.width);
  cfg.anatomy_channels = kv.get_int("anatomy_channels", cfg.anatomy_channels);
  cfg.anatomy_width = kv.get_int("anatomy_width", cfg.anatomy_width);
  cfg.decoder_width = kv.get_int("decoder_width", cfg.decoder_width);
  cfg.contrast_width = kv.get_int("contrast_width", cfg.contrast_width);
  cfg.critic_width = kv.get_int("critic_width", cfg.critic_width);
  cfg.leaky_slope = kv.get_double("leaky_slope", cfg.leaky_slope);
  validate(cfg);
  return cfg;
}

std::string encode_checkpoint(const Networks& nets, const KeyValueConfig& train_config) {
  std::ostringstream out;
  out << "SMDCKPT 1\n";
  const auto net_kv = net_config_to_kv(nets.config);
  out << "net " << net_kv.entries().size() << "\n" << net_kv.to_string();
  out << "train " << train_config.entries().size() << "\n" << train_config.to_string();

  const auto tensors = named_tensors(nets);
  out << "tensors " << tensors.size() << "\n";
  for (const auto& [name, t] : tensors) {
    out << name << " f32 " << t.dim();
    for (auto d : t.sizes()) out << ' ' << d;
    out << "\n";
  }
  out << "payload\n";
  std::string result = out.str();
  for (const auto& [name, t] : tensors) {
    auto c = t.detach().to(torch::kFloat32).contiguous();
    result.append(reinterpret_cast<const char*>(c.data_ptr<float>()),
                  static_cast<std::size_t>(c.numel()) * sizeof(float));
  }
  return result;
}

void save_checkpoint(const std::filesystem::path& path, const Networks& nets,
                     const KeyValueConfig& train_config) {
  const auto bytes = encode_checkpoint(nets, train_config);
  io::write_bytes(path, bytes.data(), bytes.size());
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  const Parsed p = parse_header(bytes);
  Checkpoint ck{Networks::create(p.net, 0), p.train};
  copy_payload(ck.networks, p.entries, bytes.data() + p.payload_offset,
               bytes.size() - p.payload_offset);
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  return decode_checkpoint(io::read_text(path));
}

void load_into(Networks& nets, const std::filesystem::path& path) {
  const std::string bytes = io::read_text(path);
  const Parsed p = parse_header(bytes);
  copy_payload(nets, p.entries, bytes.data() + p.payload_offset, bytes.size() - p.payload_offset);
}

}  // namespace smd::nets
