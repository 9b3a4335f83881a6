#pragma once

// Run directories: profile and series CSVs, gnuplot column files and the
// manifest. Every file is written to a temporary name and renamed into place.

#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "crystal/errors.hpp"
#include "crystal/grid.hpp"

namespace crystal::io {

inline constexpr const char* kVersion = "0.1.0";

/// Shortest decimal string that reads back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

/// File-name friendly time label with 10 significant digits, e.g. 1.5e-05.
inline std::string time_label(double t) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, t, std::chars_format::general, 10);
    return std::string(buf, r.ptr);
}

class RunDirectory {
public:
    explicit RunDirectory(std::filesystem::path root) : root_(std::move(root)) {
        std::error_code ec;
        std::filesystem::create_directories(root_, ec);
        if (ec) throw IoError("cannot create output directory " + root_.string() + ": " + ec.message());
    }

    const std::filesystem::path& root() const noexcept { return root_; }
    const std::vector<std::filesystem::path>& written() const noexcept { return written_; }

    /// Writes `content` to root/name atomically.
    void write_text(const std::string& name, const std::string& content) {
        const auto target = root_ / name;
        auto tmp = target;
        tmp += ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
            out << content;
            out.flush();
            if (!out) {
                out.close();
                std::error_code ec;
                std::filesystem::remove(tmp, ec);
                throw IoError("write failed for " + target.string());
            }
        }
        std::error_code ec;
        std::filesystem::rename(tmp, target, ec);
        if (ec) {
            std::filesystem::remove(tmp, ec);
            throw IoError("cannot move " + tmp.string() + " into place");
        }
        written_.push_back(target);
    }

    /// `x,h` profile file named <tag>_t<time>.csv.
    std::string write_profile(const std::string& tag, const MacroProfile& p) {
        std::string s = "x,h\n";
        for (std::size_t j = 0; j < p.size(); ++j) {
            s += format_double(p.x(j));
            s += ',';
            s += format_double(p.values[j]);
            s += '\n';
        }
        const std::string name = tag + "_t" + time_label(p.time) + ".csv";
        write_text(name, s);
        return name;
    }

    /// Two-column scalar series with the given header.
    std::string write_series(const std::string& name, std::span<const double> t, std::span<const double> v,
                             const std::string& header = "t,value") {
        if (t.size() != v.size()) throw Error("series columns differ in length");
        std::string s = header + "\n";
        for (std::size_t k = 0; k < t.size(); ++k) {
            s += format_double(t[k]);
            s += ',';
            s += format_double(v[k]);
            s += '\n';
        }
        write_text(name, s);
        return name;
    }

    /// Whitespace-separated columns with a commented header line.
    std::string write_columns(const std::string& name, const std::vector<std::string>& headers,
                              const std::vector<std::vector<double>>& cols) {
        std::string s = "#";
        for (const auto& h : headers) s += " " + h;
        s += '\n';
        const std::size_t rows = cols.empty() ? 0 : cols.front().size();
        for (const auto& c : cols) {
            if (c.size() != rows) throw Error("column lengths differ in " + name);
        }
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols.size(); ++c) {
                if (c) s += ' ';
                s += format_double(cols[c][r]);
            }
            s += '\n';
        }
        write_text(name, s);
        return name;
    }

    /// Multi-column CSV.
    std::string write_table(const std::string& name, const std::vector<std::string>& headers,
                            const std::vector<std::vector<double>>& cols) {
        std::string s;
        for (std::size_t c = 0; c < headers.size(); ++c) s += (c ? "," : "") + headers[c];
        s += '\n';
        const std::size_t rows = cols.empty() ? 0 : cols.front().size();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols.size(); ++c) {
                if (c) s += ',';
                s += format_double(cols[c][r]);
            }
            s += '\n';
        }
        write_text(name, s);
        return name;
    }

    void write_json(const std::string& name, const nlohmann::ordered_json& j) { write_text(name, j.dump(2) + "\n"); }

    /// Removes leftover temporaries after a failed run.
    void cleanup_partial() noexcept {
        std::error_code ec;
        for (auto it = std::filesystem::directory_iterator(root_, ec); !ec && it != std::filesystem::directory_iterator();
             it.increment(ec)) {
            if (it->path().extension() == ".tmp") std::filesystem::remove(it->path(), ec);
        }
    }

private:
    std::filesystem::path root_;
    std::vector<std::filesystem::path> written_;
};

}  // namespace crystal::io
