#pragma once

// Canonical JSON emission: keys appear in the order they are written and
// floats always use 17 significant digits, so equal values serialize to
// equal bytes. Parsing goes through nlohmann::json.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace adabet {

inline std::string format_double(double v) {
    if (std::isnan(v) || std::isinf(v)) return "null";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    std::string s(buf);
    // keep reals distinguishable from integers when re-read
    if (s.find_first_of(".eE") == std::string::npos) s += ".0";
    return s;
}

class JsonWriter {
public:
    JsonWriter& begin_object() { open('{'); return *this; }
    JsonWriter& end_object() { close('}'); return *this; }
    JsonWriter& begin_array() { open('['); return *this; }
    JsonWriter& end_array() { close(']'); return *this; }

    JsonWriter& key(std::string_view k) {
        separator();
        out_ += nlohmann::json(std::string(k)).dump();
        out_ += ':';
        after_key_ = true;
        return *this;
    }

    JsonWriter& value(double v) { return raw(format_double(v)); }
    JsonWriter& value(std::int64_t v) { return raw(std::to_string(v)); }
    JsonWriter& value(std::uint64_t v) { return raw(std::to_string(v)); }
    JsonWriter& value(int v) { return value(static_cast<std::int64_t>(v)); }
    JsonWriter& value(bool v) { return raw(v ? "true" : "false"); }
    JsonWriter& value(std::string_view v) { return raw(nlohmann::json(std::string(v)).dump()); }
    JsonWriter& value(const char* v) { return value(std::string_view(v)); }
    JsonWriter& null() { return raw("null"); }

    template <class T>
    JsonWriter& value(const std::optional<T>& v) {
        return v ? value(*v) : null();
    }

    template <class T>
    JsonWriter& field(std::string_view k, const T& v) {
        key(k);
        return value(v);
    }

    const std::string& str() const { return out_; }

private:
    JsonWriter& raw(std::string_view token) {
        separator();
        out_ += token;
        return *this;
    }

    void separator() {
        if (after_key_) {
            after_key_ = false;
            return;
        }
        if (!first_.empty()) {
            if (!first_.back()) out_ += ',';
            first_.back() = false;
        }
    }

    void open(char c) {
        separator();
        out_ += c;
        first_.push_back(true);
    }

    void close(char c) {
        out_ += c;
        first_.pop_back();
    }

    std::string out_;
    std::vector<bool> first_;
    bool after_key_ = false;
};

}  // namespace adabet
