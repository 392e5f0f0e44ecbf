#pragma once

// On-disk tensor bundles: <dir>/manifest.json plus one or more raw .bin blobs.
//
// Blobs hold little-endian IEEE-754 binary32 values, row-major. Each manifest
// entry records the blob file, byte offset, byte length and the SHA-256 of the
// byte region (lowercase hex). Manifest layout:
//
//   { "version": 1,
//     "tensors": [ { "name": "...", "dtype": "f32", "shape": [..],
//                    "file": "data.bin", "offset": 0, "length": 8,
//                    "sha256": "..." }, ... ] }

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "vce/tensor.hpp"

namespace vce::store {

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kDefaultBlob = "data.bin";

enum class ErrorKind {
  io,
  malformed_manifest,
  duplicate_name,
  unsupported_dtype,
  missing_blob,
  shape_inconsistent,    // manifest length != 4 * element count
  byte_length_mismatch,  // blob shorter than offset + length
  hash_mismatch,
};

std::string to_string(ErrorKind kind);

class BundleError : public std::runtime_error {
 public:
  BundleError(ErrorKind kind, std::string tensor, const std::string& detail);
  ErrorKind kind() const { return kind_; }
  const std::string& tensor() const { return tensor_; }

 private:
  ErrorKind kind_;
  std::string tensor_;
};

struct ManifestEntry {
  std::string name;
  std::string dtype = "f32";
  std::vector<std::size_t> shape;
  std::string file = kDefaultBlob;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::string sha256;
};

struct Manifest {
  int version = kManifestVersion;
  std::vector<ManifestEntry> tensors;
};

/// Writes every tensor to `<dir>/data.bin` and describes it in `<dir>/manifest.json`.
/// The directory is created if needed; an existing bundle there is replaced.
Manifest write_bundle(const TensorMap& tensors, const std::filesystem::path& dir);

/// Loads all tensors, verifying each region's hash first.
TensorMap read_bundle(const std::filesystem::path& dir);

Manifest read_manifest(const std::filesystem::path& dir);

struct EntryStatus {
  std::string name;
  bool ok = true;
  ErrorKind error = ErrorKind::io;
  std::string detail;
};

struct ValidationReport {
  bool manifest_ok = true;
  std::string manifest_error;
  std::vector<EntryStatus> entries;

  bool all_ok() const;
  std::string to_text() const;
};

/// Checks every entry, streaming blob regions in fixed-size chunks.
ValidationReport validate_bundle(const std::filesystem::path& dir);

/// True when `dir` holds a bundle that validates cleanly.
bool bundle_valid(const std::filesystem::path& dir);

std::string sha256_hex(const void* data, std::size_t size);

}  // namespace vce::store
