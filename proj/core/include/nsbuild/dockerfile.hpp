#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "nsbuild/error.hpp"

namespace nsbuild::dockerfile {

enum class InstructionKind { From, Run, Copy, Env, Workdir, Arg };

std::string_view keyword(InstructionKind kind);

struct FromArgs {
  std::string image;
  bool operator==(const FromArgs&) const = default;
};

struct RunArgs {
  std::string command;
  bool operator==(const RunArgs&) const = default;
};

struct CopyArgs {
  std::vector<std::string> sources;
  std::string destination;
  bool operator==(const CopyArgs&) const = default;
};

// ENV and ARG share a shape. ENV always carries a value; ARG may not.
struct VariableArgs {
  std::string key;
  std::optional<std::string> value;
  bool operator==(const VariableArgs&) const = default;
};

struct WorkdirArgs {
  std::string path;
  bool operator==(const WorkdirArgs&) const = default;
};

using Payload = std::variant<FromArgs, RunArgs, CopyArgs, VariableArgs, WorkdirArgs>;

struct Instruction {
  InstructionKind kind;
  Payload payload;
  int line = 0;  // 1-based line of the keyword

  bool operator==(const Instruction&) const = default;

  template <typename T>
  const T& as() const {
    return std::get<T>(payload);
  }
};

struct Recipe {
  std::vector<Instruction> instructions;
  std::string source_path;
  // Non-fatal diagnostics, e.g. references to undefined variables.
  std::vector<std::string> warnings;
};

enum class ParseErrorKind {
  MissingFrom,
  MultipleFrom,
  UnknownInstruction,
  UnterminatedContinuation,
  EmptyRun,
  Malformed,
};

class ParseError : public KindedError<ParseErrorKind> {
 public:
  ParseError(ParseErrorKind kind, std::string source_path, int line, std::string detail);

  int line() const noexcept { return line_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  int line_;
  std::string detail_;
};

class WrongKind : public Error {
 public:
  using Error::Error;
};

// Values supplied with --build-arg. They override ARG defaults but only
// take effect once the ARG is declared, as in other interpreters.
using BuildArgs = std::map<std::string, std::string>;

// Parses the supported Dockerfile subset. Pure: no filesystem or
// environment access.
Recipe parse(std::string_view text, std::string source_path, const BuildArgs& build_args = {});

// ["/bin/sh", "-c", command] for a RUN instruction.
std::vector<std::string> shell_form(const Instruction& run);

// One-line Dockerfile text for the instruction. Parsing the result yields
// an equal instruction (line numbers aside).
std::string serialize(const Instruction& instruction);

// Expands $NAME and ${NAME}; `\$` yields a literal dollar sign. Names not
// in `vars` expand to "" and are appended to `undefined`.
std::string substitute(std::string_view text, const std::map<std::string, std::string>& vars,
                       std::vector<std::string>* undefined = nullptr);

}  // namespace nsbuild::dockerfile
