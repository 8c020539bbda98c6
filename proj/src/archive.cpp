#include "skattn/archive.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "skattn/error.hpp"

namespace skattn {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes little-endian hosts");

namespace {

constexpr char kMagic[4] = {'S', 'K', 'W', 'A'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t pos) {
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  return v;
}

}  // namespace

const Tensor* WeightArchive::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_weights(const std::string& path, const NamedTensors& tensors, const nlohmann::json& metadata) {
  nlohmann::json header;
  header["format_version"] = kArchiveVersion;
  header["metadata"] = metadata;
  header["tensors"] = nlohmann::json::object();
  std::set<std::string> seen;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (!seen.insert(name).second) throw InvalidArgument("save_weights: duplicate name " + name);
    header["tensors"][name] = {{"shape", t.shape()}, {"dtype", "f64"}, {"offset", offset}};
    offset += t.numel() * sizeof(double);
  }
  const std::string text = header.dump();
  std::string blob(kMagic, 4);
  put<std::uint32_t>(blob, kArchiveVersion);
  put<std::uint64_t>(blob, text.size());
  blob += text;
  blob.reserve(blob.size() + offset);
  for (const auto& entry : tensors) {
    const auto d = entry.second.data();
    blob.append(reinterpret_cast<const char*>(d.data()), d.size_bytes());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("write failed: " + path);
}

WeightArchive load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() < 16 || std::memcmp(blob.data(), kMagic, 4) != 0) {
    throw CorruptHeader(path + ": bad magic");
  }
  const auto version = get<std::uint32_t>(blob, 4);
  if (version != kArchiveVersion) {
    throw FormatVersionMismatch(path + ": format version " + std::to_string(version));
  }
  const auto header_len = get<std::uint64_t>(blob, 8);
  if (header_len > blob.size() - 16) throw CorruptHeader(path + ": header length exceeds file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeader(path + ": " + e.what());
  }
  if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_object()) {
    throw CorruptHeader(path + ": missing tensor table");
  }
  if (header.value("format_version", 0u) != kArchiveVersion) {
    throw FormatVersionMismatch(path + ": header format version mismatch");
  }
  const std::size_t base = 16 + header_len;
  const std::uint64_t payload = blob.size() - base;
  WeightArchive archive;
  if (header.contains("metadata")) archive.metadata = header["metadata"];

  struct Span {
    std::uint64_t begin, end;
  };
  std::vector<Span> spans;
  std::uint64_t total = 0;
  try {
    for (const auto& [name, entry] : header["tensors"].items()) {
      if (entry.at("dtype").get<std::string>() != "f64") throw CorruptHeader(name + ": unsupported dtype");
      const Shape shape = entry.at("shape").get<Shape>();
      for (int d : shape) {
        if (d < 0) throw CorruptHeader(name + ": negative extent");
      }
      const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
      const std::uint64_t bytes = shape_numel(shape) * sizeof(double);
      if (offset % sizeof(double) != 0 || offset > payload || bytes > payload - offset) {
        throw CorruptHeader(path + ": tensor " + name + " extends past the payload");
      }
      spans.push_back({offset, offset + bytes});
      total += bytes;
      std::vector<double> values(shape_numel(shape));
      std::memcpy(values.data(), blob.data() + base + offset, bytes);
      archive.tensors.emplace_back(name, Tensor::create(shape, std::move(values)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeader(path + ": " + e.what());
  }
  std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].begin < spans[i - 1].end) throw CorruptHeader(path + ": overlapping tensors");
  }
  if (total != payload) {
    throw CorruptHeader(path + ": payload is " + std::to_string(payload) + " bytes, header describes " +
                        std::to_string(total));
  }
  // nlohmann orders object keys; restore save order by offset.
  std::sort(archive.tensors.begin(), archive.tensors.end(), [&](const auto& a, const auto& b) {
    return header["tensors"][a.first]["offset"].template get<std::uint64_t>() <
           header["tensors"][b.first]["offset"].template get<std::uint64_t>();
  });
  return archive;
}

void assign_weights(const NamedTensors& targets, const WeightArchive& archive) {
  for (const auto& [name, t] : targets) {
    const Tensor* src = archive.find(name);
    if (!src) throw CorruptHeader("archive lacks tensor " + name);
    if (src->shape() != t.shape()) {
      throw CorruptHeader("tensor " + name + " has shape " + shape_str(src->shape()) + ", expected " +
                          shape_str(t.shape()));
    }
    std::copy(src->data().begin(), src->data().end(), t.impl()->data.begin());
  }
}

std::string weights_digest(const NamedTensors& tensors) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("sha256 unavailable");
  }
  for (const auto& [name, t] : tensors) {
    EVP_DigestUpdate(ctx, name.data(), name.size() + 1);
    for (int d : t.shape()) {
      const std::int64_t e = d;
      EVP_DigestUpdate(ctx, &e, sizeof(e));
    }
    EVP_DigestUpdate(ctx, t.data().data(), t.data().size_bytes());
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

}  // namespace skattn
