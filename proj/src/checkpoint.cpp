#include "mammovl/checkpoint.hpp"

#include "mammovl/errors.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unistd.h>
#include <unordered_map>

namespace mammovl {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'V', 'L', 'C', 'K', 'P', 'T', '1'};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw IntegrityError("sha256 computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

std::string payload_bytes(const std::vector<TensorRecord>& tensors) {
  std::string out;
  for (const auto& t : tensors)
    out.append(reinterpret_cast<const char*>(t.value.data()), t.value.numel() * sizeof(float));
  return out;
}

void save_checkpoint(Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string payload = payload_bytes(ckpt.tensors);
  ckpt.sha256 = sha256_hex(payload);
  nlohmann::json table = nlohmann::json::array();
  for (const auto& t : ckpt.tensors) table.push_back({{"name", t.name}, {"shape", t.value.shape()}});
  const nlohmann::json header{{"format_version", Checkpoint::kFormatVersion},
                              {"kind", ckpt.kind},
                              {"config", ckpt.config},
                              {"model", ckpt.model},
                              {"epoch", ckpt.epoch},
                              {"validation_loss", ckpt.validation_loss},
                              {"sha256", ckpt.sha256},
                              {"tensors", table}};
  const std::string head = header.dump();
  const std::uint64_t head_len = head.size();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp-" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&head_len), sizeof head_len);
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw ConfigError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint not found: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw IntegrityError(path.string() + " is not a checkpoint");
  std::uint64_t head_len = 0;
  std::memcpy(&head_len, bytes.data() + 8, sizeof head_len);
  if (head_len > bytes.size() - 16) throw IntegrityError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(path.string() + ": unreadable header (" + e.what() + ")");
  }
  if (header.value("format_version", 0) != Checkpoint::kFormatVersion)
    throw IntegrityError(path.string() + ": unsupported format version");
  const std::string_view payload(bytes.data() + 16 + head_len, bytes.size() - 16 - head_len);
  const std::string digest = sha256_hex(payload);
  if (digest != header.at("sha256").get<std::string>())
    throw IntegrityError(path.string() + ": payload hash mismatch (stored " + header.at("sha256").get<std::string>() +
                         ", computed " + digest + ")");

  Checkpoint ckpt;
  ckpt.kind = header.at("kind").get<std::string>();
  ckpt.config = header.at("config");
  ckpt.model = header.at("model");
  ckpt.epoch = header.at("epoch").get<int>();
  ckpt.validation_loss = header.at("validation_loss").get<double>();
  ckpt.sha256 = digest;
  std::size_t offset = 0;
  for (const auto& entry : header.at("tensors")) {
    auto shape = entry.at("shape").get<std::vector<int>>();
    nn::Tensor t(shape);
    const std::size_t n = t.numel() * sizeof(float);
    if (offset + n > payload.size()) throw IntegrityError(path.string() + ": payload shorter than tensor table");
    std::memcpy(t.data(), payload.data() + offset, n);
    offset += n;
    ckpt.tensors.push_back({entry.at("name").get<std::string>(), std::move(t)});
  }
  if (offset != payload.size()) throw IntegrityError(path.string() + ": trailing payload bytes");
  return ckpt;
}

std::vector<TensorRecord> snapshot_parameters(const nn::ParameterList& params) {
  std::vector<TensorRecord> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.var.value()});
  return out;
}

void restore_parameters(const std::vector<TensorRecord>& records, nn::ParameterList& params, bool allow_extra) {
  std::unordered_map<std::string, const TensorRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  if (!allow_extra && by_name.size() != params.size())
    throw ShapeError("checkpoint holds " + std::to_string(records.size()) + " tensors, model has " +
                     std::to_string(params.size()));
  for (auto& p : params) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ShapeError("checkpoint has no tensor '" + p.name + "'");
    if (it->second->value.shape() != p.var.value().shape())
      throw ShapeError("tensor '" + p.name + "' is " + it->second->value.shape_string() + ", model expects " +
                       p.var.value().shape_string());
    p.var.value().storage() = it->second->value.storage();
  }
}

std::string parameters_sha256(const nn::ParameterList& params) {
  std::string bytes;
  for (const auto& p : params) {
    bytes += p.name;
    bytes.push_back('\0');
    bytes.append(reinterpret_cast<const char*>(p.var.value().data()), p.var.value().numel() * sizeof(float));
  }
  return sha256_hex(bytes);
}

}  // namespace mammovl
