#include "vce/tensor_store.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

namespace vce::store {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return "io error";
    case ErrorKind::malformed_manifest: return "malformed manifest";
    case ErrorKind::duplicate_name: return "duplicate name";
    case ErrorKind::unsupported_dtype: return "unsupported dtype";
    case ErrorKind::missing_blob: return "missing blob";
    case ErrorKind::shape_inconsistent: return "shape/length inconsistency";
    case ErrorKind::byte_length_mismatch: return "byte-length mismatch";
    case ErrorKind::hash_mismatch: return "hash mismatch";
  }
  return "unknown";
}

BundleError::BundleError(ErrorKind kind, std::string tensor, const std::string& detail)
    : std::runtime_error(to_string(kind) + (tensor.empty() ? "" : " for tensor '" + tensor + "'") +
                         (detail.empty() ? "" : ": " + detail)),
      kind_(kind),
      tensor_(std::move(tensor)) {}

namespace {

struct DigestDeleter {
  void operator()(EVP_MD_CTX* ctx) const { EVP_MD_CTX_free(ctx); }
};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      throw std::runtime_error("sha256 init failed");
  }
  void update(const void* data, std::size_t size) {
    if (size > 0 && EVP_DigestUpdate(ctx_.get(), data, size) != 1) throw std::runtime_error("sha256 update failed");
  }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), digest.data(), &len) != 1) throw std::runtime_error("sha256 final failed");
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
      out.push_back(kHex[digest[i] >> 4]);
      out.push_back(kHex[digest[i] & 0xF]);
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, DigestDeleter> ctx_;
};

json entry_to_json(const ManifestEntry& e) {
  return json{{"name", e.name},     {"dtype", e.dtype},   {"shape", e.shape},  {"file", e.file},
              {"offset", e.offset}, {"length", e.length}, {"sha256", e.sha256}};
}

ManifestEntry entry_from_json(const json& j) {
  ManifestEntry e;
  try {
    e.name = j.at("name").get<std::string>();
    e.dtype = j.at("dtype").get<std::string>();
    e.shape = j.at("shape").get<std::vector<std::size_t>>();
    e.file = j.at("file").get<std::string>();
    e.offset = j.at("offset").get<std::uint64_t>();
    e.length = j.at("length").get<std::uint64_t>();
    e.sha256 = j.at("sha256").get<std::string>();
  } catch (const json::exception& ex) {
    throw BundleError(ErrorKind::malformed_manifest, e.name, ex.what());
  }
  if (e.shape.empty()) throw BundleError(ErrorKind::malformed_manifest, e.name, "rank must be >= 1");
  if (e.file.empty() || e.file.find('/') != std::string::npos || e.file.find("..") != std::string::npos)
    throw BundleError(ErrorKind::malformed_manifest, e.name, "blob file must be a plain file name");
  return e;
}

// Checks the entry against its own metadata (no blob access).
void check_entry_metadata(const ManifestEntry& e) {
  if (e.dtype != "f32") throw BundleError(ErrorKind::unsupported_dtype, e.name, e.dtype);
  const std::uint64_t expected = 4ull * element_count(e.shape);
  if (e.length != expected)
    throw BundleError(ErrorKind::shape_inconsistent, e.name,
                      "length " + std::to_string(e.length) + " != 4 x " + std::to_string(element_count(e.shape)));
}

std::uintmax_t blob_size(const fs::path& blob, const std::string& tensor) {
  std::error_code ec;
  if (!fs::is_regular_file(blob, ec)) throw BundleError(ErrorKind::missing_blob, tensor, blob.filename().string());
  const auto size = fs::file_size(blob, ec);
  if (ec) throw BundleError(ErrorKind::io, tensor, ec.message());
  return size;
}

void check_region_fits(const ManifestEntry& e, std::uintmax_t file_size) {
  if (e.offset > file_size || e.length > file_size - e.offset)
    throw BundleError(ErrorKind::byte_length_mismatch, e.name,
                      "region [" + std::to_string(e.offset) + ", +" + std::to_string(e.length) + ") exceeds " +
                          e.file + " size " + std::to_string(file_size));
}

}  // namespace

std::string sha256_hex(const void* data, std::size_t size) {
  Sha256 h;
  h.update(data, size);
  return h.hex();
}

Manifest write_bundle(const TensorMap& tensors, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw BundleError(ErrorKind::io, "", "cannot create " + dir.string() + ": " + ec.message());

  Manifest manifest;
  const fs::path blob_path = dir / kDefaultBlob;
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) throw BundleError(ErrorKind::io, "", "cannot open " + blob_path.string());

  std::set<std::string> seen;
  std::uint64_t offset = 0;
  for (const auto& [key, tensor] : tensors) {
    if (!seen.insert(tensor.name()).second) throw BundleError(ErrorKind::duplicate_name, tensor.name(), "");
    ManifestEntry e;
    e.name = tensor.name();
    e.shape = tensor.shape();
    e.offset = offset;
    e.length = tensor.byte_size();
    e.sha256 = sha256_hex(tensor.data().data(), tensor.byte_size());
    blob.write(reinterpret_cast<const char*>(tensor.data().data()), static_cast<std::streamsize>(e.length));
    offset += e.length;
    manifest.tensors.push_back(std::move(e));
  }
  blob.close();
  if (!blob) throw BundleError(ErrorKind::io, "", "write failed for " + blob_path.string());

  json j{{"version", manifest.version}, {"tensors", json::array()}};
  for (const auto& e : manifest.tensors) j["tensors"].push_back(entry_to_json(e));
  std::ofstream out(dir / kManifestFile, std::ios::trunc);
  out << j.dump(2) << '\n';
  out.close();
  if (!out) throw BundleError(ErrorKind::io, "", "write failed for manifest in " + dir.string());
  return manifest;
}

Manifest read_manifest(const fs::path& dir) {
  std::ifstream in(dir / kManifestFile);
  if (!in) throw BundleError(ErrorKind::io, "", "cannot open " + (dir / kManifestFile).string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& ex) {
    throw BundleError(ErrorKind::malformed_manifest, "", ex.what());
  }
  Manifest m;
  if (!j.is_object() || !j.contains("version") || !j.contains("tensors") || !j["tensors"].is_array())
    throw BundleError(ErrorKind::malformed_manifest, "", "expected object with 'version' and 'tensors'");
  m.version = j["version"].get<int>();
  if (m.version != kManifestVersion)
    throw BundleError(ErrorKind::malformed_manifest, "", "unsupported version " + std::to_string(m.version));
  std::set<std::string> seen;
  for (const auto& item : j["tensors"]) {
    ManifestEntry e = entry_from_json(item);
    if (!seen.insert(e.name).second) throw BundleError(ErrorKind::duplicate_name, e.name, "");
    m.tensors.push_back(std::move(e));
  }
  return m;
}

TensorMap read_bundle(const fs::path& dir) {
  const Manifest manifest = read_manifest(dir);
  TensorMap out;
  for (const auto& e : manifest.tensors) {
    check_entry_metadata(e);
    const fs::path blob_path = dir / e.file;
    check_region_fits(e, blob_size(blob_path, e.name));

    std::vector<float> data(e.length / 4);
    std::ifstream blob(blob_path, std::ios::binary);
    blob.seekg(static_cast<std::streamoff>(e.offset));
    blob.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(e.length));
    if (!blob && e.length > 0) throw BundleError(ErrorKind::io, e.name, "short read from " + e.file);
    if (sha256_hex(data.data(), e.length) != e.sha256) throw BundleError(ErrorKind::hash_mismatch, e.name, e.file);
    out.emplace(e.name, Tensor(e.name, e.shape, std::move(data)));
  }
  return out;
}

bool ValidationReport::all_ok() const {
  if (!manifest_ok) return false;
  for (const auto& e : entries)
    if (!e.ok) return false;
  return true;
}

std::string ValidationReport::to_text() const {
  std::ostringstream os;
  if (!manifest_ok) {
    os << "manifest: " << manifest_error << '\n';
    return os.str();
  }
  for (const auto& e : entries) {
    os << e.name << ": " << (e.ok ? std::string("ok") : to_string(e.error));
    if (!e.ok && !e.detail.empty()) os << " (" << e.detail << ')';
    os << '\n';
  }
  os << entries.size() << " tensor(s), " << (all_ok() ? "all ok" : "errors found") << '\n';
  return os.str();
}

ValidationReport validate_bundle(const fs::path& dir) {
  ValidationReport report;
  Manifest manifest;
  try {
    manifest = read_manifest(dir);
  } catch (const std::exception& ex) {
    report.manifest_ok = false;
    report.manifest_error = ex.what();
    return report;
  }

  constexpr std::size_t kChunk = 1 << 16;
  std::vector<char> buffer(kChunk);
  for (const auto& e : manifest.tensors) {
    EntryStatus status{e.name};
    try {
      check_entry_metadata(e);
      const fs::path blob_path = dir / e.file;
      check_region_fits(e, blob_size(blob_path, e.name));
      std::ifstream blob(blob_path, std::ios::binary);
      blob.seekg(static_cast<std::streamoff>(e.offset));
      Sha256 h;
      std::uint64_t remaining = e.length;
      while (remaining > 0) {
        const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(remaining, kChunk));
        blob.read(buffer.data(), static_cast<std::streamsize>(n));
        if (!blob) throw BundleError(ErrorKind::io, e.name, "short read");
        h.update(buffer.data(), n);
        remaining -= n;
      }
      if (h.hex() != e.sha256) throw BundleError(ErrorKind::hash_mismatch, e.name, e.file);
    } catch (const BundleError& ex) {
      status.ok = false;
      status.error = ex.kind();
      status.detail = ex.what();
    }
    report.entries.push_back(std::move(status));
  }
  return report;
}

bool bundle_valid(const fs::path& dir) {
  std::error_code ec;
  if (!fs::exists(dir / kManifestFile, ec)) return false;
  return validate_bundle(dir).all_ok();
}

}  // namespace vce::store
