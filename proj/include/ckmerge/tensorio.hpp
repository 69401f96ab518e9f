#pragma once

// Checkpoint container I/O.
//
// File layout, bit-exact:
//   bytes 0..7   unsigned 64-bit little-endian header length N
//   bytes 8..8+N UTF-8 JSON object: tensor name -> {"dtype","shape","data_offsets"},
//                plus an optional "__metadata__" string map
//   byte  8+N..  data region; each tensor little-endian, row-major, contiguous,
//                at data_offsets relative to the region start
//
// Canonical serialization (what write_checkpoint emits): "__metadata__" first
// when non-empty, tensor names sorted by Unicode code point, per-tensor keys
// in the order dtype, shape, data_offsets, no insignificant whitespace, and
// payloads tiling the data region in name order. Identical logical content
// yields identical bytes, so fingerprints are digests over canonical bytes.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "ckmerge/dtype.hpp"

namespace ckmerge {

struct TensorMeta {
    std::string              name;
    Dtype                    dtype = Dtype::F32;
    std::vector<std::size_t> shape;                // empty = scalar (1 element)
    std::pair<uint64_t, uint64_t> data_offsets{0, 0};

    std::size_t numel() const;
    std::size_t nbytes() const { return numel() * dtype_size(dtype); }
};

struct Tensor {
    Dtype                    dtype = Dtype::F32;
    std::vector<std::size_t> shape;
    std::vector<std::byte>   data;                 // raw storage-dtype bytes

    std::size_t numel() const;
    std::vector<float> values_f32() const { return to_f32(data, dtype); }

    bool operator==(const Tensor &) const = default;
};

Tensor make_tensor_f32(std::vector<std::size_t> shape, std::vector<float> values);

struct Checkpoint {
    std::map<std::string, Tensor>      tensors;    // sorted = canonical order
    std::map<std::string, std::string> metadata;

    // Digest over the canonical serialized bytes. Identical tensor contents
    // give identical fingerprints regardless of construction order.
    uint64_t fingerprint() const;

    bool operator==(const Checkpoint &) const = default;
};

// Eager whole-file read. Values are kept in their storage dtype.
Checkpoint read_checkpoint(const std::filesystem::path & path);

// Canonical serialization to disk.
void write_checkpoint(const Checkpoint & ckpt, const std::filesystem::path & path);

// Canonical serialization to memory (header prefix + header + payloads).
std::vector<std::byte> serialize_checkpoint(const Checkpoint & ckpt);

// Streaming reader: parses the header eagerly, fetches tensor payloads on
// demand with pread so distinct tensors can be read from multiple threads.
class CheckpointReader {
public:
    explicit CheckpointReader(const std::filesystem::path & path);
    ~CheckpointReader();

    CheckpointReader(const CheckpointReader &) = delete;
    CheckpointReader & operator=(const CheckpointReader &) = delete;

    const std::filesystem::path & path() const { return path_; }
    const std::map<std::string, TensorMeta> & tensors() const { return tensors_; }
    const std::map<std::string, std::string> & metadata() const { return metadata_; }

    bool   has_tensor(const std::string & name) const { return tensors_.count(name) != 0; }
    Tensor read_tensor(const std::string & name) const;
    // Widened payload, avoiding a second copy for F32 tensors.
    std::vector<float> read_tensor_f32(const std::string & name) const;

    Checkpoint read_all() const;

    // Digest over the *canonical* serialization of this file's contents —
    // equal to Checkpoint::fingerprint() of read_all(). Streams one tensor
    // at a time.
    uint64_t fingerprint() const;

private:
    std::vector<std::byte> read_payload(const TensorMeta & meta) const;

    std::filesystem::path              path_;
    int                                fd_ = -1;
    uint64_t                           data_start_ = 0;  // 8 + header length
    uint64_t                           data_size_  = 0;
    std::map<std::string, TensorMeta>  tensors_;
    std::map<std::string, std::string> metadata_;
};

// Streaming writer: all tensor metadata is declared up front, the canonical
// header is written immediately, and payloads land via pwrite at their
// precomputed offsets — in any order, from any thread. finish() verifies
// every declared tensor was written.
class CheckpointWriter {
public:
    CheckpointWriter(const std::filesystem::path & path,
                     const std::map<std::string, TensorMeta> & tensors,
                     const std::map<std::string, std::string> & metadata = {});
    ~CheckpointWriter();

    CheckpointWriter(const CheckpointWriter &) = delete;
    CheckpointWriter & operator=(const CheckpointWriter &) = delete;

    const std::map<std::string, TensorMeta> & tensors() const { return tensors_; }

    void write_tensor(const std::string & name, std::span<const std::byte> payload);
    void finish();

private:
    std::filesystem::path             path_;
    int                               fd_ = -1;
    uint64_t                          data_start_ = 0;
    std::map<std::string, TensorMeta> tensors_;   // canonical offsets assigned
    std::map<std::string, bool>       written_;   // guarded by mu_
    std::mutex                        mu_;
    bool                              finished_ = false;
};

// Canonical JSON header for a set of tensor metas (offsets reassigned to the
// canonical tiling). Returns the header text and the metas with offsets.
std::string build_canonical_header(std::map<std::string, TensorMeta> & tensors,
                                   const std::map<std::string, std::string> & metadata);

// FNV-1a over a whole file, streamed in chunks.
uint64_t hash_file(const std::filesystem::path & path);

} // namespace ckmerge
