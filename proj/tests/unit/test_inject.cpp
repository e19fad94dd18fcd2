#include <gtest/gtest.h>

#include "nsbuild/dockerfile.hpp"
#include "nsbuild/inject.hpp"
#include "testing.hpp"

using namespace nsbuild::inject;
namespace t = nsbuild::test;

namespace {

const DistroConfig& builtin(std::string_view name) {
  for (const auto& c : builtin_configs()) {
    if (c.name == name) return c;
  }
  throw std::runtime_error("no builtin config " + std::string(name));
}

// Records commands; `passing` commands exit 0, everything else 1.
struct FakeRunner {
  std::vector<std::string> ran;
  std::set<std::string> passing;
  int action_code = 0;
  StepRunner runner() {
    return [this](const std::string& cmd) {
      ran.push_back(cmd);
      if (passing.contains(cmd)) return 0;
      for (const auto& c : builtin_configs()) {
        for (const auto& s : c.init_steps) {
          if (s.action == cmd) return action_code;
        }
      }
      return 1;
    };
  }
};

std::vector<std::string> lines;
LineSink collect() {
  return [](const std::string& l) { lines.push_back(l); };
}

}  // namespace

TEST(ArgvRepr, PythonListLiteral) {
  EXPECT_EQ(argv_repr({"/bin/sh", "-c", "echo hello"}), "['/bin/sh', '-c', 'echo hello']");
  EXPECT_EQ(argv_repr({"fakeroot", "/bin/sh", "-c", "apt-get update"}),
            "['fakeroot', '/bin/sh', '-c', 'apt-get update']");
  EXPECT_EQ(argv_repr({}), "[]");
  EXPECT_EQ(argv_repr({"it's"}), "[\"it's\"]");
  EXPECT_EQ(argv_repr({"both ' and \""}), "['both \\' and \"']");
  EXPECT_EQ(argv_repr({"a\\b\nc\x01"}), "['a\\\\b\\nc\\x01']");
}

TEST(Configs, BuiltinsAreRhel7AndDebderiv) {
  const auto& rhel = builtin("rhel7");
  EXPECT_EQ(rhel.description, "CentOS/RHEL 7");
  ASSERT_EQ(rhel.init_steps.size(), 1u);
  EXPECT_EQ(rhel.init_steps[0].check, "command -v fakeroot > /dev/null");
  EXPECT_NE(rhel.init_steps[0].action.find("yum --enablerepo=epel install -y fakeroot"), std::string::npos);
  const auto& deb = builtin("debderiv");
  EXPECT_EQ(deb.description, "Debian (9, 10) or Ubuntu (16, 18, 20)");
  ASSERT_EQ(deb.init_steps.size(), 2u);
  EXPECT_EQ(deb.init_steps[0].action, "echo 'APT::Sandbox::User \"root\";' > /etc/apt/apt.conf.d/no-sandbox");
  EXPECT_EQ(deb.init_steps[1].action, "apt-get update && apt-get install -y pseudo");
  EXPECT_EQ(builtin_configs().size(), 2u);
}

TEST(Configs, RejectsInvalid) {
  auto kind = [](std::string_view text) {
    try {
      load_configs(text);
    } catch (const InjectError& e) {
      return e.kind();
    }
    ADD_FAILURE() << text;
    return InjectErrorKind::InitStepFailed;
  };
  EXPECT_EQ(kind("{"), InjectErrorKind::ConfigInvalid);
  EXPECT_EQ(kind("{\"configs\": [{\"name\": \"x\", \"description\": \"d\"}]}"), InjectErrorKind::ConfigInvalid);
  EXPECT_EQ(kind("{\"configs\": [{\"name\": \"x\", \"description\": \"d\", \"match\": [{\"file\": \"rel\", \"regex\": \"a\"}]}]}"),
            InjectErrorKind::ConfigInvalid);
  EXPECT_EQ(kind("{\"configs\": [{\"name\": \"x\", \"description\": \"d\", \"match\": [{\"file\": \"/f\", \"regex\": \"(\"}]}]}"),
            InjectErrorKind::ConfigInvalid);
  const char* dup =
      "{\"configs\": [{\"name\": \"x\", \"description\": \"d\", \"match\": [{\"file\": \"/f\", \"regex\": \"a\"}]},"
      "{\"name\": \"x\", \"description\": \"d\", \"match\": [{\"file\": \"/f\", \"regex\": \"a\"}]}]}";
  EXPECT_EQ(kind(dup), InjectErrorKind::ConfigInvalid);
}

TEST(Configs, CustomConfigDefaults) {
  const auto c = load_configs(
      "{\"configs\": [{\"name\": \"alpine\", \"description\": \"Alpine\", "
      "\"match\": [{\"file\": \"/etc/alpine-release\", \"regex\": \"^3\\\\.\"}], \"triggers\": [\"apk\"]}]}");
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].wrapper, std::vector<std::string>{"fakeroot"});
  EXPECT_TRUE(c[0].init_steps.empty());
}

TEST(Detect, ByFileContents) {
  t::TempDir d;
  t::write_file(d / "rh/etc/redhat-release", "CentOS Linux release 7.9.2009 (Core)\n");
  t::write_file(d / "deb/etc/os-release", "VERSION_CODENAME=buster\n");
  t::write_file(d / "rh8/etc/redhat-release", "CentOS Linux release 8.3.2011\n");
  fs::create_directories(d / "empty");
  EXPECT_EQ(detect_config(d / "rh", builtin_configs())->name, "rhel7");
  EXPECT_EQ(detect_config(d / "deb", builtin_configs())->name, "debderiv");
  EXPECT_FALSE(detect_config(d / "rh8", builtin_configs()));
  EXPECT_FALSE(detect_config(d / "empty", builtin_configs()));
}

TEST(Detect, FixturesAndOrderStability) {
  EXPECT_EQ(detect_config(t::fixture_root("rhel7"), builtin_configs())->name, "rhel7");
  EXPECT_EQ(detect_config(t::fixture_root("debderiv"), builtin_configs())->name, "debderiv");
  // A root matching both picks the first in registry order, every time.
  t::TempDir d;
  t::write_file(d / "etc/redhat-release", "release 7.1");
  t::write_file(d / "etc/os-release", "buster");
  for (int i = 0; i < 5; ++i) EXPECT_EQ(detect_config(d.path(), builtin_configs())->name, "rhel7");
  auto reversed = builtin_configs();
  std::reverse(reversed.begin(), reversed.end());
  EXPECT_EQ(detect_config(d.path(), reversed)->name, "debderiv");
}

TEST(Detect, MatcherCannotEscapeRoot) {
  t::TempDir d;
  fs::create_directories(d / "root/etc");
  fs::create_symlink("/etc/os-release", d / "root/etc/redhat-release");
  EXPECT_FALSE(detect_config(d / "root", builtin_configs()));
}

TEST(NeedsModification, Examples) {
  EXPECT_TRUE(needs_modification("yum install -y openssh", builtin("rhel7")));
  EXPECT_FALSE(needs_modification("echo hello", builtin("rhel7")));
  EXPECT_TRUE(needs_modification("apt-get update", builtin("debderiv")));
  EXPECT_TRUE(needs_modification("rpm -i x.rpm", builtin("rhel7")));
  EXPECT_FALSE(needs_modification("echo hello", builtin("debderiv")));
}

TEST(Rewrite, PrependsWrapper) {
  EXPECT_EQ(rewrite({"/bin/sh", "-c", "yum install -y openssh"}, builtin("rhel7")),
            (std::vector<std::string>{"fakeroot", "/bin/sh", "-c", "yum install -y openssh"}));
  EXPECT_EQ(rewrite({"/bin/sh", "-c", "apt-get install -y openssh-client"}, builtin("debderiv")),
            (std::vector<std::string>{"fakeroot", "/bin/sh", "-c", "apt-get install -y openssh-client"}));
  DistroConfig bare = builtin("rhel7");
  bare.wrapper.clear();
  const std::vector<std::string> argv{"/bin/sh", "-c", "x"};
  EXPECT_EQ(rewrite(argv, bare), argv);
}

TEST(ApplyInit, RunsActionWhenCheckFails) {
  lines.clear();
  FakeRunner fake;
  ForceState state{true, builtin("rhel7"), false, 0};
  apply_init(fake.runner(), state, collect());
  EXPECT_TRUE(state.initialized);
  ASSERT_EQ(fake.ran.size(), 2u);
  EXPECT_EQ(fake.ran[0], "command -v fakeroot > /dev/null");
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0], "workarounds: init step 1: checking: $ command -v fakeroot > /dev/null");
  EXPECT_EQ(lines[1], "workarounds: init step 1: $ " + builtin("rhel7").init_steps[0].action);
}

TEST(ApplyInit, SkipsActionWhenCheckPasses) {
  lines.clear();
  FakeRunner fake;
  fake.passing = {"command -v fakeroot > /dev/null"};
  ForceState state{true, builtin("rhel7"), false, 0};
  apply_init(fake.runner(), state, collect());
  EXPECT_TRUE(state.initialized);
  EXPECT_EQ(fake.ran, std::vector<std::string>{"command -v fakeroot > /dev/null"});
}

TEST(ApplyInit, DebianStepsInOrder) {
  lines.clear();
  FakeRunner fake;
  ForceState state{true, builtin("debderiv"), false, 0};
  apply_init(fake.runner(), state, collect());
  ASSERT_EQ(fake.ran.size(), 4u);
  EXPECT_NE(fake.ran[1].find("APT::Sandbox::User"), std::string::npos);
  EXPECT_EQ(fake.ran[3], "apt-get update && apt-get install -y pseudo");
  EXPECT_EQ(lines[2].rfind("workarounds: init step 2: checking:", 0), 0u);
}

TEST(ApplyInit, FailingActionNamesStep) {
  lines.clear();
  FakeRunner fake;
  fake.passing = {builtin("debderiv").init_steps[0].check};
  fake.action_code = 100;
  ForceState state{true, builtin("debderiv"), false, 0};
  try {
    apply_init(fake.runner(), state, collect());
    FAIL();
  } catch (const InjectError& e) {
    EXPECT_EQ(e.kind(), InjectErrorKind::InitStepFailed);
    EXPECT_EQ(e.step(), 2);
    EXPECT_NE(std::string(e.what()).find("exit code 100"), std::string::npos);
  }
  EXPECT_FALSE(state.initialized);
}

TEST(PrepareRun, InitOnceAcrossRuns) {
  lines.clear();
  FakeRunner fake;
  ForceState state{true, builtin("debderiv"), false, 0};
  const auto update = nsbuild::dockerfile::shell_form(
      nsbuild::dockerfile::parse("FROM d\nRUN apt-get update", "x").instructions[1]);
  const auto first = prepare_run(update, "apt-get update", fake.runner(), state, collect());
  const auto ran_after_first = fake.ran.size();
  const auto second = prepare_run({"/bin/sh", "-c", "apt-get install -y openssh-client"},
                                  "apt-get install -y openssh-client", fake.runner(), state, collect());
  EXPECT_EQ(fake.ran.size(), ran_after_first);
  EXPECT_EQ(state.modified_count, 2);
  EXPECT_EQ(first.front(), "fakeroot");
  EXPECT_EQ(lines.back(),
            "workarounds: RUN: new command: ['fakeroot', '/bin/sh', '-c', 'apt-get install -y openssh-client']");
}

TEST(PrepareRun, DisabledNeverModifies) {
  lines.clear();
  FakeRunner fake;
  ForceState off{false, builtin("rhel7"), false, 0};
  const auto r = nsbuild::dockerfile::parse(t::read_file(t::data_path("centos7.dockerfile")), "centos7.dockerfile");
  for (const auto& ins : r.instructions) {
    if (ins.kind != nsbuild::dockerfile::InstructionKind::Run) continue;
    const auto argv = nsbuild::dockerfile::shell_form(ins);
    EXPECT_EQ(prepare_run(argv, ins.as<nsbuild::dockerfile::RunArgs>().command, fake.runner(), off, collect()), argv);
  }
  EXPECT_TRUE(fake.ran.empty());
  EXPECT_TRUE(lines.empty());
  EXPECT_EQ(off.modified_count, 0);
}

TEST(PrepareRun, UntriggeredRunIsUntouched) {
  FakeRunner fake;
  ForceState state{true, builtin("rhel7"), false, 0};
  const std::vector<std::string> argv{"/bin/sh", "-c", "echo hello"};
  EXPECT_EQ(prepare_run(argv, "echo hello", fake.runner(), state, collect()), argv);
  EXPECT_FALSE(state.initialized);
}

TEST(Advise, Messages) {
  ForceState failed_off{false, builtin("rhel7"), false, 0};
  EXPECT_EQ(advise(failed_off, true), "hint: --force may fix it: available config rhel7: CentOS/RHEL 7");
  EXPECT_FALSE(advise(failed_off, false));
  ForceState on{true, builtin("debderiv"), true, 2};
  EXPECT_EQ(advise(on, false), "--force: init OK & modified 2 RUN instructions");
  ForceState none{false, std::nullopt, false, 0};
  EXPECT_FALSE(advise(none, true));
  EXPECT_EQ(will_use_line(builtin("rhel7")), "will use --force: rhel7: CentOS/RHEL 7");
}
