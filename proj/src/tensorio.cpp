#include "ckmerge/tensorio.hpp"

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fcntl.h>
#include <sys/stat.h>
#include <sys/types.h>
#include <unistd.h>

#include <json.hpp>

#include "ckmerge/digest.hpp"
#include "ckmerge/errors.hpp"

namespace ckmerge {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr const char * kMetadataKey = "__metadata__";

[[noreturn]] void throw_errno(const std::string & what, const std::filesystem::path & path) {
    throw IoError(what + " " + path.string() + ": " + std::strerror(errno));
}

uint64_t load_le64(const std::byte * p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
        v = (v << 8) | uint64_t(std::to_integer<uint8_t>(p[i]));
    return v;
}

void store_le64(std::byte * p, uint64_t v) {
    for (int i = 0; i < 8; ++i)
        p[i] = std::byte(uint8_t(v >> (8 * i)));
}

void pread_full(int fd, std::byte * buf, std::size_t len, uint64_t offset,
                const std::filesystem::path & path) {
    std::size_t done = 0;
    while (done < len) {
        ssize_t n = ::pread(fd, buf + done, len - done, off_t(offset + done));
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno("cannot read", path);
        }
        if (n == 0) throw IoError("unexpected end of file reading " + path.string());
        done += std::size_t(n);
    }
}

void pwrite_full(int fd, const std::byte * buf, std::size_t len, uint64_t offset,
                 const std::filesystem::path & path) {
    std::size_t done = 0;
    while (done < len) {
        ssize_t n = ::pwrite(fd, buf + done, len - done, off_t(offset + done));
        if (n < 0) {
            if (errno == EINTR) continue;
            throw_errno("cannot write", path);
        }
        done += std::size_t(n);
    }
}

std::size_t checked_numel(const std::vector<std::size_t> & shape) {
    uint64_t n = 1;
    for (std::size_t d : shape) {
        // Guard n * d * elemsize against overflow (elemsize <= 8).
        if (d != 0 && n > UINT64_MAX / 8 / d)
            throw ValidationError("tensor shape overflows addressable size");
        n *= d;
    }
    return std::size_t(n);
}

// Top-level object keys in order of appearance. The standard JSON parser
// silently merges duplicate keys, so duplicate tensor names are detected by
// scanning the raw header text. `text` has already been accepted by the
// parser, so it is well-formed.
std::vector<std::string> top_level_keys(const std::string & text) {
    std::vector<std::string> keys;
    int depth = 0;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        char c = text[i];
        if (c == '"') {
            std::size_t start = i++;
            while (i < n && text[i] != '"') {
                if (text[i] == '\\' && i + 1 < n) ++i;
                ++i;
            }
            if (i >= n) throw ParseError("malformed header string literal");
            ++i;  // past closing quote
            std::size_t j = i;
            while (j < n && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
            if (depth == 1 && j < n && text[j] == ':') {
                // Decode escapes by parsing the raw token as a JSON string.
                json key = json::parse(text.substr(start, i - start), nullptr, false);
                if (key.is_discarded() || !key.is_string())
                    throw ParseError("malformed header key");
                keys.push_back(key.get<std::string>());
            }
        } else {
            if (c == '{' || c == '[') ++depth;
            else if (c == '}' || c == ']') --depth;
            ++i;
        }
    }
    return keys;
}

void parse_header(const std::string & text, uint64_t data_size,
                  std::map<std::string, TensorMeta> & tensors,
                  std::map<std::string, std::string> & metadata) {
    json header = json::parse(text, nullptr, false);
    if (header.is_discarded())
        throw ParseError("header is not valid JSON");
    if (!header.is_object())
        throw ParseError("header must be a JSON object");

    {
        std::vector<std::string> keys = top_level_keys(text);
        std::sort(keys.begin(), keys.end());
        auto dup = std::adjacent_find(keys.begin(), keys.end());
        if (dup != keys.end())
            throw ParseError("duplicate tensor name in header: " + *dup);
    }

    tensors.clear();
    metadata.clear();
    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string & name = it.key();
        const json & entry = it.value();
        if (name == kMetadataKey) {
            if (!entry.is_object())
                throw ParseError("__metadata__ must be a JSON object");
            for (auto m = entry.begin(); m != entry.end(); ++m) {
                if (!m.value().is_string())
                    throw ParseError("__metadata__ values must be strings");
                metadata[m.key()] = m.value().get<std::string>();
            }
            continue;
        }

        if (!entry.is_object())
            throw ParseError("tensor entry must be a JSON object: " + name);
        for (auto f = entry.begin(); f != entry.end(); ++f) {
            const std::string & k = f.key();
            if (k != "dtype" && k != "shape" && k != "data_offsets")
                throw ParseError("unexpected field '" + k + "' in tensor entry: " + name);
        }
        if (!entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets"))
            throw ParseError("tensor entry missing required field: " + name);

        TensorMeta meta;
        meta.name = name;
        if (!entry["dtype"].is_string())
            throw ParseError("dtype must be a string: " + name);
        const std::string dtype_str = entry["dtype"].get<std::string>();
        auto dtype = dtype_from_name(dtype_str);
        if (!dtype)
            throw ParseError("unknown dtype '" + dtype_str + "' for tensor: " + name);
        meta.dtype = *dtype;

        const json & shape = entry["shape"];
        if (!shape.is_array())
            throw ParseError("shape must be an array: " + name);
        for (const json & d : shape) {
            if (!d.is_number_unsigned())
                throw ParseError("shape entries must be non-negative integers: " + name);
            meta.shape.push_back(d.get<std::size_t>());
        }

        const json & offs = entry["data_offsets"];
        if (!offs.is_array() || offs.size() != 2 ||
            !offs[0].is_number_unsigned() || !offs[1].is_number_unsigned())
            throw ParseError("data_offsets must be [begin, end]: " + name);
        meta.data_offsets = {offs[0].get<uint64_t>(), offs[1].get<uint64_t>()};

        const auto [begin, end] = meta.data_offsets;
        if (begin > end)
            throw ParseError("data_offsets begin exceeds end: " + name);
        if (end > data_size)
            throw ParseError("data_offsets extend past end of file: " + name);
        std::size_t nbytes = 0;
        try {
            nbytes = meta.nbytes();
        } catch (const ValidationError & e) {
            throw ParseError(std::string(e.what()) + ": " + name);
        }
        if (end - begin != nbytes)
            throw ParseError("data_offsets length does not match dtype and shape: " + name);

        tensors[name] = std::move(meta);
    }

    // Non-empty payloads must tile the data region exactly; empty payloads
    // may sit at any in-range offset.
    std::vector<std::pair<uint64_t, uint64_t>> ranges;
    for (const auto & [name, meta] : tensors)
        if (meta.data_offsets.first != meta.data_offsets.second)
            ranges.push_back(meta.data_offsets);
    std::sort(ranges.begin(), ranges.end());
    uint64_t cursor = 0;
    for (const auto & [begin, end] : ranges) {
        if (begin < cursor)
            throw ParseError("tensor data ranges overlap");
        if (begin > cursor)
            throw ParseError("gap in tensor data region");
        cursor = end;
    }
    if (cursor != data_size)
        throw ParseError("tensor data does not cover the data region");
}

void hash_region(Fnv1a & h, const std::byte * data, std::size_t len) {
    h.update(reinterpret_cast<const char *>(data), len);
}

void hash_prefix_and_header(Fnv1a & h, const std::string & header) {
    std::byte prefix[8];
    store_le64(prefix, header.size());
    hash_region(h, prefix, 8);
    h.update(header.data(), header.size());
}

} // namespace

std::size_t TensorMeta::numel() const { return checked_numel(shape); }
std::size_t Tensor::numel() const { return checked_numel(shape); }

Tensor make_tensor_f32(std::vector<std::size_t> shape, std::vector<float> values) {
    Tensor t;
    t.dtype = Dtype::F32;
    t.shape = std::move(shape);
    if (t.numel() != values.size())
        throw ValidationError("value count does not match shape");
    t.data.resize(values.size() * sizeof(float));
    std::memcpy(t.data.data(), values.data(), t.data.size());
    return t;
}

std::string build_canonical_header(std::map<std::string, TensorMeta> & tensors,
                                   const std::map<std::string, std::string> & metadata) {
    ordered_json header = ordered_json::object();
    if (!metadata.empty()) {
        ordered_json meta = ordered_json::object();
        for (const auto & [k, v] : metadata) meta[k] = v;
        header[kMetadataKey] = std::move(meta);
    }
    uint64_t offset = 0;
    for (auto & [name, meta] : tensors) {
        if (name == kMetadataKey)
            throw ValidationError("tensor name __metadata__ is reserved");
        meta.name = name;
        meta.data_offsets = {offset, offset + meta.nbytes()};
        offset = meta.data_offsets.second;
        ordered_json entry = ordered_json::object();
        entry["dtype"] = dtype_name(meta.dtype);
        entry["shape"] = meta.shape;
        entry["data_offsets"] = {meta.data_offsets.first, meta.data_offsets.second};
        header[name] = std::move(entry);
    }
    return header.dump();
}

namespace {

// Canonical metas for an in-memory checkpoint, validating payload sizes.
std::map<std::string, TensorMeta> metas_of(const Checkpoint & ckpt) {
    std::map<std::string, TensorMeta> metas;
    for (const auto & [name, t] : ckpt.tensors) {
        TensorMeta meta;
        meta.name = name;
        meta.dtype = t.dtype;
        meta.shape = t.shape;
        if (t.data.size() != meta.nbytes())
            throw ValidationError("tensor payload size does not match dtype and shape: " + name);
        metas[name] = std::move(meta);
    }
    return metas;
}

} // namespace

uint64_t Checkpoint::fingerprint() const {
    auto metas = metas_of(*this);
    std::string header = build_canonical_header(metas, metadata);
    Fnv1a h;
    hash_prefix_and_header(h, header);
    for (const auto & [name, t] : tensors)
        hash_region(h, t.data.data(), t.data.size());
    return h.digest();
}

std::vector<std::byte> serialize_checkpoint(const Checkpoint & ckpt) {
    auto metas = metas_of(ckpt);
    std::string header = build_canonical_header(metas, ckpt.metadata);
    uint64_t total = 0;
    for (const auto & [name, t] : ckpt.tensors) total += t.data.size();

    std::vector<std::byte> out(8 + header.size() + total);
    store_le64(out.data(), header.size());
    std::memcpy(out.data() + 8, header.data(), header.size());
    std::size_t pos = 8 + header.size();
    for (const auto & [name, t] : ckpt.tensors) {
        std::memcpy(out.data() + pos, t.data.data(), t.data.size());
        pos += t.data.size();
    }
    return out;
}

Checkpoint read_checkpoint(const std::filesystem::path & path) {
    CheckpointReader reader(path);
    return reader.read_all();
}

void write_checkpoint(const Checkpoint & ckpt, const std::filesystem::path & path) {
    auto metas = metas_of(ckpt);
    CheckpointWriter writer(path, metas, ckpt.metadata);
    for (const auto & [name, t] : ckpt.tensors)
        writer.write_tensor(name, t.data);
    writer.finish();
}

CheckpointReader::CheckpointReader(const std::filesystem::path & path) : path_(path) {
    fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd_ < 0) throw_errno("cannot open", path);

    struct stat st{};
    if (::fstat(fd_, &st) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw_errno("cannot stat", path);
    }
    uint64_t file_size = uint64_t(st.st_size);

    try {
        if (file_size < 8)
            throw ParseError("file too small for header length prefix: " + path.string());
        std::byte prefix[8];
        pread_full(fd_, prefix, 8, 0, path);
        uint64_t header_len = load_le64(prefix);
        if (header_len > file_size - 8)
            throw ParseError("header length exceeds file size: " + path.string());

        std::string header(header_len, '\0');
        pread_full(fd_, reinterpret_cast<std::byte *>(header.data()), header_len, 8, path);

        data_start_ = 8 + header_len;
        data_size_ = file_size - data_start_;
        parse_header(header, data_size_, tensors_, metadata_);
    } catch (...) {
        ::close(fd_);
        fd_ = -1;
        throw;
    }
}

CheckpointReader::~CheckpointReader() {
    if (fd_ >= 0) ::close(fd_);
}

std::vector<std::byte> CheckpointReader::read_payload(const TensorMeta & meta) const {
    std::vector<std::byte> buf(meta.nbytes());
    pread_full(fd_, buf.data(), buf.size(), data_start_ + meta.data_offsets.first, path_);
    return buf;
}

Tensor CheckpointReader::read_tensor(const std::string & name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end())
        throw ValidationError("no tensor named " + name + " in " + path_.string());
    Tensor t;
    t.dtype = it->second.dtype;
    t.shape = it->second.shape;
    t.data = read_payload(it->second);
    return t;
}

std::vector<float> CheckpointReader::read_tensor_f32(const std::string & name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end())
        throw ValidationError("no tensor named " + name + " in " + path_.string());
    const TensorMeta & meta = it->second;
    if (meta.dtype == Dtype::F32) {
        std::vector<float> out(meta.numel());
        pread_full(fd_, reinterpret_cast<std::byte *>(out.data()), meta.nbytes(),
                   data_start_ + meta.data_offsets.first, path_);
        return out;
    }
    return to_f32(read_payload(meta), meta.dtype);
}

Checkpoint CheckpointReader::read_all() const {
    Checkpoint ckpt;
    ckpt.metadata = metadata_;
    for (const auto & [name, meta] : tensors_) {
        Tensor t;
        t.dtype = meta.dtype;
        t.shape = meta.shape;
        t.data = read_payload(meta);
        ckpt.tensors[name] = std::move(t);
    }
    return ckpt;
}

uint64_t CheckpointReader::fingerprint() const {
    auto metas = tensors_;
    std::string header = build_canonical_header(metas, metadata_);
    Fnv1a h;
    hash_prefix_and_header(h, header);
    for (const auto & [name, meta] : tensors_) {
        std::vector<std::byte> payload = read_payload(tensors_.at(name));
        hash_region(h, payload.data(), payload.size());
    }
    return h.digest();
}

CheckpointWriter::CheckpointWriter(const std::filesystem::path & path,
                                   const std::map<std::string, TensorMeta> & tensors,
                                   const std::map<std::string, std::string> & metadata)
    : path_(path), tensors_(tensors) {
    std::string header = build_canonical_header(tensors_, metadata);
    data_start_ = 8 + header.size();
    uint64_t total = 0;
    for (const auto & [name, meta] : tensors_) {
        total += meta.nbytes();
        written_[name] = false;
    }

    fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd_ < 0) throw_errno("cannot create", path);
    try {
        if (::ftruncate(fd_, off_t(data_start_ + total)) != 0)
            throw_errno("cannot size", path);
        std::byte prefix[8];
        store_le64(prefix, header.size());
        pwrite_full(fd_, prefix, 8, 0, path);
        pwrite_full(fd_, reinterpret_cast<const std::byte *>(header.data()), header.size(), 8,
                    path);
    } catch (...) {
        ::close(fd_);
        fd_ = -1;
        throw;
    }
}

CheckpointWriter::~CheckpointWriter() {
    if (fd_ >= 0) ::close(fd_);
}

void CheckpointWriter::write_tensor(const std::string & name, std::span<const std::byte> payload) {
    auto it = tensors_.find(name);
    if (it == tensors_.end())
        throw ValidationError("tensor not declared to writer: " + name);
    if (payload.size() != it->second.nbytes())
        throw ValidationError("payload size does not match declared tensor: " + name);
    {
        std::lock_guard<std::mutex> lock(mu_);
        if (written_.at(name))
            throw ValidationError("tensor written twice: " + name);
        written_[name] = true;
    }
    pwrite_full(fd_, payload.data(), payload.size(),
                data_start_ + it->second.data_offsets.first, path_);
}

void CheckpointWriter::finish() {
    if (finished_) return;
    for (const auto & [name, done] : written_)
        if (!done) throw ValidationError("tensor declared but never written: " + name);
    if (::close(fd_) != 0) {
        fd_ = -1;
        throw_errno("cannot close", path_);
    }
    fd_ = -1;
    finished_ = true;
}

uint64_t hash_file(const std::filesystem::path & path) {
    int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd < 0) throw_errno("cannot open", path);
    Fnv1a h;
    std::vector<char> buf(1 << 20);
    for (;;) {
        ssize_t n = ::read(fd, buf.data(), buf.size());
        if (n < 0) {
            if (errno == EINTR) continue;
            int saved = errno;
            ::close(fd);
            errno = saved;
            throw_errno("cannot read", path);
        }
        if (n == 0) break;
        h.update(buf.data(), std::size_t(n));
    }
    ::close(fd);
    return h.digest();
}

} // namespace ckmerge
