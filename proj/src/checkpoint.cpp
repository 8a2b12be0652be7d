#include "mgic/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <map>

namespace mgic {

std::uint32_t crc32(const unsigned char* data, std::size_t n) {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

namespace {

void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<unsigned char>& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::vector<unsigned char>& buf;
    std::size_t pos = 0;
    const std::string& path;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) {
            throw IoError("checkpoint: truncated file " + path + " at byte offset " +
                          std::to_string(pos));
        }
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + static_cast<std::size_t>(i)]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + static_cast<std::size_t>(i)]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
        pos += n;
        return s;
    }
};

void put_record(std::vector<unsigned char>& buf, const std::string& name,
                const std::vector<std::int64_t>& shape, const float* data, std::int64_t numel) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    put_u32(buf, static_cast<std::uint32_t>(shape.size()));
    for (auto e : shape) put_u64(buf, static_cast<std::uint64_t>(e));
    const std::size_t start = buf.size();
    buf.resize(start + static_cast<std::size_t>(numel) * 4);
    std::memcpy(buf.data() + start, data, static_cast<std::size_t>(numel) * 4);
}

struct Record {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<float> data;
};

Record read_record(Reader& r) {
    Record rec;
    const std::uint32_t name_len = r.u32();
    rec.name = r.str(name_len);
    const std::uint32_t rank = r.u32();
    std::int64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        rec.shape.push_back(static_cast<std::int64_t>(r.u64()));
        numel *= rec.shape.back();
    }
    r.need(static_cast<std::size_t>(numel) * 4);
    rec.data.resize(static_cast<std::size_t>(numel));
    std::memcpy(rec.data.data(), r.buf.data() + r.pos, static_cast<std::size_t>(numel) * 4);
    r.pos += static_cast<std::size_t>(numel) * 4;
    return rec;
}

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open " + path);
    return std::vector<unsigned char>((std::istreambuf_iterator<char>(f)),
                                      std::istreambuf_iterator<char>());
}

// Verifies magic, version and checksum; returns a reader positioned after the
// version field with the trailing checksum stripped from its view.
std::vector<unsigned char> load_verified(const std::string& path) {
    std::vector<unsigned char> buf = read_file(path);
    if (buf.size() < 12 || std::memcmp(buf.data(), "MGIC", 4) != 0) {
        throw IoError("checkpoint: bad magic in " + path);
    }
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i)
        stored |= static_cast<std::uint32_t>(buf[buf.size() - 4 + static_cast<std::size_t>(i)]) << (8 * i);
    const std::uint32_t computed = crc32(buf.data(), buf.size() - 4);
    if (stored != computed) {
        throw IoError("checkpoint: checksum mismatch in " + path + " (stored " +
                      std::to_string(stored) + ", computed " + std::to_string(computed) + ")");
    }
    buf.resize(buf.size() - 4);
    return buf;
}

}  // namespace

void save_checkpoint(Model<float>& model, const std::string& path) {
    std::vector<unsigned char> buf;
    buf.insert(buf.end(), {'M', 'G', 'I', 'C'});
    put_u32(buf, kCheckpointVersion);
    const std::string arch = model.arch.dump();
    put_u64(buf, arch.size());
    buf.insert(buf.end(), arch.begin(), arch.end());

    std::vector<std::pair<std::string, Parameter<float>*>> params;
    std::vector<std::pair<std::string, std::vector<float>*>> buffers;
    model.net->visit(
        "", [&](const std::string& name, Parameter<float>& p) { params.emplace_back(name, &p); },
        [&](const std::string& name, std::vector<float>& b) { buffers.emplace_back(name, &b); });

    put_u32(buf, static_cast<std::uint32_t>(params.size()));
    for (auto& [name, p] : params)
        put_record(buf, name, p->value.shape(), p->value.data(), p->value.numel());
    put_u32(buf, static_cast<std::uint32_t>(buffers.size()));
    for (auto& [name, b] : buffers)
        put_record(buf, name, {static_cast<std::int64_t>(b->size())}, b->data(),
                   static_cast<std::int64_t>(b->size()));

    put_u32(buf, crc32(buf.data(), buf.size()));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint: cannot write " + path);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("checkpoint: write failed for " + path);
}

Model<float> load_checkpoint(const std::string& path) {
    std::vector<unsigned char> buf = load_verified(path);
    Reader r{buf, 4, path};
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw IoError("checkpoint: unsupported format version " + std::to_string(version) +
                      " in " + path);
    }
    const std::uint64_t arch_len = r.u64();
    json arch;
    try {
        arch = json::parse(r.str(arch_len));
    } catch (const json::parse_error& e) {
        throw IoError("checkpoint: corrupt architecture blob in " + path + ": " + e.what());
    }
    Rng rng(0);
    Model<float> model = build_model<float>(arch, rng);

    std::map<std::string, Parameter<float>*> params;
    std::map<std::string, std::vector<float>*> buffers;
    model.net->visit(
        "", [&](const std::string& name, Parameter<float>& p) { params[name] = &p; },
        [&](const std::string& name, std::vector<float>& b) { buffers[name] = &b; });

    const std::uint32_t n_params = r.u32();
    if (n_params != params.size()) {
        throw IoError("checkpoint: " + std::to_string(n_params) + " parameters in file, " +
                      std::to_string(params.size()) + " in architecture");
    }
    for (std::uint32_t i = 0; i < n_params; ++i) {
        Record rec = read_record(r);
        auto it = params.find(rec.name);
        if (it == params.end()) {
            throw IoError("checkpoint: parameter '" + rec.name + "' not in architecture");
        }
        if (rec.shape != it->second->value.shape()) {
            throw IoError("checkpoint: shape mismatch for '" + rec.name + "'");
        }
        std::copy(rec.data.begin(), rec.data.end(), it->second->value.mutable_data());
    }
    const std::uint32_t n_buffers = r.u32();
    if (n_buffers != buffers.size()) {
        throw IoError("checkpoint: " + std::to_string(n_buffers) + " buffers in file, " +
                      std::to_string(buffers.size()) + " in architecture");
    }
    for (std::uint32_t i = 0; i < n_buffers; ++i) {
        Record rec = read_record(r);
        auto it = buffers.find(rec.name);
        if (it == buffers.end() || rec.data.size() != it->second->size()) {
            throw IoError("checkpoint: buffer mismatch for '" + rec.name + "'");
        }
        std::copy(rec.data.begin(), rec.data.end(), it->second->begin());
    }
    if (r.pos != buf.size()) {
        throw IoError("checkpoint: " + std::to_string(buf.size() - r.pos) +
                      " unexpected trailing bytes in " + path);
    }
    return model;
}

json checkpoint_arch(const std::string& path) {
    std::vector<unsigned char> buf = load_verified(path);
    Reader r{buf, 4, path};
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw IoError("checkpoint: unsupported format version " + std::to_string(version) +
                      " in " + path);
    }
    const std::uint64_t arch_len = r.u64();
    try {
        return json::parse(r.str(arch_len));
    } catch (const json::parse_error& e) {
        throw IoError("checkpoint: corrupt architecture blob in " + path + ": " + e.what());
    }
}

}  // namespace mgic
