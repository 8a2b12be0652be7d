#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mgic/errors.hpp"

namespace mgic {

#ifndef MGIC_GIT_DESCRIBE
#define MGIC_GIT_DESCRIBE "unknown"
#endif

inline const char* git_describe() { return MGIC_GIT_DESCRIBE; }

// Locale-independent shortest round-trip formatting ('.' decimal separator).
inline std::string format_number(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

// CSV with a header row and a trailing metadata comment line carrying the
// build id, seed and config hash (plus any command-specific pairs).
class CsvWriter {
public:
    explicit CsvWriter(std::string path) : path_(std::move(path)) {}

    void header(const std::vector<std::string>& cols) { line(cols); }
    void row(const std::vector<std::string>& cols) { line(cols); }

    void metadata(std::uint64_t seed, const std::string& config_hash,
                  const std::vector<std::pair<std::string, std::string>>& extra = {}) {
        buf_ << "#git-describe=" << git_describe() << ",seed=" << seed
             << ",config-hash=" << config_hash;
        for (const auto& [k, v] : extra) buf_ << "," << k << "=" << v;
        buf_ << "\n";
    }

    void write() const {
        std::ofstream f(path_, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write " + path_);
        const std::string s = buf_.str();
        f.write(s.data(), static_cast<std::streamsize>(s.size()));
        if (!f) throw IoError("write failed for " + path_);
    }

    const std::string& path() const { return path_; }

private:
    void line(const std::vector<std::string>& cols) {
        for (std::size_t i = 0; i < cols.size(); ++i) buf_ << (i ? "," : "") << cols[i];
        buf_ << "\n";
    }

    std::string path_;
    std::ostringstream buf_;
};

}  // namespace mgic
