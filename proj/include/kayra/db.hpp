#pragma once

// Thin RAII layer over sqlite3: one connection, prepared statements, and
// transactions. Errors surface as kayra::Error(IoError).

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

struct sqlite3;
struct sqlite3_stmt;

namespace kayra::db {

class Statement {
public:
    Statement(sqlite3* db, const std::string& sql);
    ~Statement();
    Statement(Statement&&) noexcept;
    Statement& operator=(Statement&&) = delete;
    Statement(const Statement&) = delete;

    Statement& bind(int index, std::int64_t v);
    Statement& bind(int index, int v) { return bind(index, static_cast<std::int64_t>(v)); }
    Statement& bind(int index, double v);
    Statement& bind(int index, const std::string& v);
    Statement& bind(int index, const char* v) { return bind(index, std::string(v)); }
    Statement& bind_blob(int index, const std::vector<std::uint8_t>& v);
    Statement& bind_null(int index);
    Statement& bind(int index, const std::optional<std::int64_t>& v) {
        return v ? bind(index, *v) : bind_null(index);
    }
    Statement& bind(int index, const std::optional<std::string>& v) {
        return v ? bind(index, *v) : bind_null(index);
    }

    /// True while a row is available.
    bool step();
    /// Runs to completion.
    void run();

    [[nodiscard]] bool is_null(int col) const;
    [[nodiscard]] std::int64_t integer(int col) const;
    [[nodiscard]] double real(int col) const;
    [[nodiscard]] std::string text(int col) const;
    [[nodiscard]] std::vector<std::uint8_t> blob(int col) const;
    [[nodiscard]] std::optional<std::int64_t> opt_integer(int col) const;
    [[nodiscard]] std::optional<std::string> opt_text(int col) const;

private:
    sqlite3* db_;
    sqlite3_stmt* stmt_;
};

class Database {
public:
    /// Opens or creates `path`; ":memory:" for a private in-memory database.
    explicit Database(const std::string& path);
    ~Database();
    Database(const Database&) = delete;
    Database& operator=(const Database&) = delete;

    void exec(const std::string& sql);
    Statement prepare(const std::string& sql);
    /// Prepares and binds `args` to parameters 1..n.
    template <typename... Args>
    Statement query(const std::string& sql, const Args&... args) {
        Statement s = prepare(sql);
        int i = 0;
        (s.bind(++i, args), ...);
        return s;
    }
    [[nodiscard]] std::int64_t changes() const;
    [[nodiscard]] std::int64_t last_insert_rowid() const;

private:
    sqlite3* db_ = nullptr;
};

/// BEGIN IMMEDIATE on construction; ROLLBACK unless commit() was called.
class Transaction {
public:
    explicit Transaction(Database& db);
    ~Transaction();
    Transaction(const Transaction&) = delete;
    Transaction& operator=(const Transaction&) = delete;
    void commit();

private:
    Database& db_;
    bool done_ = false;
};

}  // namespace kayra::db
