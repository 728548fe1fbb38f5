#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace kda {

/// Line-oriented `key=value` document. Blank lines and lines starting with
/// '#' are ignored; keys keep their insertion order on write.
class KeyValueFile {
 public:
  static KeyValueFile parse(std::istream& in, const std::string& origin = "<stream>");
  static KeyValueFile load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  /// Throws std::runtime_error naming the key when it is absent.
  const std::string& require(const std::string& key) const;

  const std::vector<std::string>& keys() const noexcept { return order_; }

  void write(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

}  // namespace kda
