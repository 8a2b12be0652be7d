#include "mgic/idx.hpp"

#include <fstream>

namespace mgic {

namespace {

std::uint32_t read_u32_be(const std::vector<unsigned char>& buf, std::size_t offset,
                          const std::string& path) {
    if (offset + 4 > buf.size()) {
        throw IoError("idx: truncated file " + path + " at byte offset " + std::to_string(offset));
    }
    return (static_cast<std::uint32_t>(buf[offset]) << 24) |
           (static_cast<std::uint32_t>(buf[offset + 1]) << 16) |
           (static_cast<std::uint32_t>(buf[offset + 2]) << 8) |
           static_cast<std::uint32_t>(buf[offset + 3]);
}

void write_u32_be(std::vector<unsigned char>& buf, std::uint32_t v) {
    buf.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
    buf.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    buf.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    buf.push_back(static_cast<unsigned char>(v & 0xff));
}

}  // namespace

IdxContent load_idx_raw(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("idx: cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 4) throw IoError("idx: truncated file " + path + " at byte offset 0");
    if (buf[0] != 0 || buf[1] != 0) {
        throw IoError("idx: bad magic in " + path + " at byte offset 0");
    }
    IdxContent out;
    out.dtype_code = buf[2];
    if (out.dtype_code != 0x08) {
        throw IoError("idx: unsupported dtype code " + std::to_string(out.dtype_code) + " in " +
                      path + " at byte offset 2");
    }
    const int ndims = buf[3];
    if (ndims < 1 || ndims > 4) {
        throw IoError("idx: unsupported rank " + std::to_string(ndims) + " in " + path +
                      " at byte offset 3");
    }
    std::size_t offset = 4;
    std::int64_t total = 1;
    for (int i = 0; i < ndims; ++i) {
        const std::uint32_t d = read_u32_be(buf, offset, path);
        out.dims.push_back(static_cast<std::int64_t>(d));
        total *= static_cast<std::int64_t>(d);
        offset += 4;
    }
    if (buf.size() - offset != static_cast<std::size_t>(total)) {
        throw IoError("idx: payload of " + path + " has " + std::to_string(buf.size() - offset) +
                      " bytes, expected " + std::to_string(total) + " (at byte offset " +
                      std::to_string(offset) + ")");
    }
    out.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(offset), buf.end());
    return out;
}

void save_idx_raw(const std::string& path, const IdxContent& content) {
    std::vector<unsigned char> buf;
    buf.push_back(0);
    buf.push_back(0);
    buf.push_back(static_cast<unsigned char>(content.dtype_code));
    buf.push_back(static_cast<unsigned char>(content.dims.size()));
    std::int64_t total = 1;
    for (std::int64_t d : content.dims) {
        write_u32_be(buf, static_cast<std::uint32_t>(d));
        total *= d;
    }
    if (total != static_cast<std::int64_t>(content.bytes.size())) {
        throw IoError("idx: payload size " + std::to_string(content.bytes.size()) +
                      " does not match dims (" + std::to_string(total) + ")");
    }
    buf.insert(buf.end(), content.bytes.begin(), content.bytes.end());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("idx: cannot write " + path);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("idx: write failed for " + path);
}

void save_idx_labels(const std::string& path, const std::vector<int>& labels) {
    IdxContent raw;
    raw.dims = {static_cast<std::int64_t>(labels.size())};
    raw.bytes.reserve(labels.size());
    for (int v : labels) {
        if (v < 0 || v > 255) throw IoError("idx: label " + std::to_string(v) + " out of byte range");
        raw.bytes.push_back(static_cast<unsigned char>(v));
    }
    save_idx_raw(path, raw);
}

}  // namespace mgic
