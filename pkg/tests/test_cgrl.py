"""Tests for the command-line entry point and its exit codes."""

import json
import os
import shutil
import sys
import tempfile
import unittest
from contextlib import redirect_stdout
from io import StringIO
from unittest.mock import patch

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cgrl import build_parser, main
from errors import ConfigError
from graph_store import load_stream

TINY = ["--K", "2", "--n", "1", "--d", "4", "--epochs", "1", "--batch-size", "16", "--show-progress", "false"]


class TestCommandLine(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.stream = os.path.join(self.tmp, "stream")
        self.runs = os.path.join(self.tmp, "runs")

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def _main(self, argv):
        with redirect_stdout(StringIO()) as out:
            code = main(argv)
        return code, out.getvalue()

    def _split(self):
        code, _ = self._main(["split", "--synthetic", "--out", self.stream])
        self.assertEqual(code, 0)

    def test_split_synthetic(self):
        self._split()
        self.assertEqual(len(load_stream(self.stream).parts), 2)
        self.assertTrue(os.path.exists(os.path.join(self.stream, "cgrl.log")))

    def test_split_triple_file(self):
        path = os.path.join(self.tmp, "kg.tsv")
        with open(path, "w") as f:
            for i in range(40):
                f.write(f"e{i % 9}\tr{i % 3}\te{(i * 7 + 1) % 11}\n")
        code, _ = self._main(["split", "--triples", path, "--parts", "0.5,0.5", "--out", self.stream])
        self.assertEqual(code, 0)
        self.assertEqual(len(load_stream(self.stream).parts), 2)

    def test_split_citation_files(self):
        nodes, edges = os.path.join(self.tmp, "nodes.tsv"), os.path.join(self.tmp, "edges.tsv")
        with open(nodes, "w") as f:
            for i in range(12):
                f.write(f"p{i}\t{'ab'[i % 2]}\t{i % 3}.0,1.0\n")
        with open(edges, "w") as f:
            for i in range(12):
                f.write(f"p{i}\tp{(i + 1) % 12}\n")
        code, _ = self._main(["split", "--nodes", nodes, "--edges", edges, "--parts", "0.5,0.5",
                              "--out", self.stream])
        self.assertEqual(code, 0)
        self.assertEqual(load_stream(self.stream).mode, "node-classification")

    def test_nodes_without_edges(self):
        code, _ = self._main(["split", "--nodes", "nodes.tsv", "--out", self.stream])
        self.assertEqual(code, 2)

    def test_bad_ratios(self):
        code, _ = self._main(["split", "--synthetic", "--within", "0.8,0.1", "--out", self.stream])
        self.assertEqual(code, 2)

    def test_train_eval_report(self):
        self._split()
        run = os.path.join(self.runs, "dicgrl")
        code, out = self._main(["train", "--stream", self.stream, "--strategy", "dicgrl", "--out", run] + TINY)
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out)["part"], 1)

        code, out = self._main(["eval", "--run", run, "--part", "0"])
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out)["part"], 0)

        code, out = self._main(["report", "--runs", self.runs])
        self.assertEqual(code, 0)
        self.assertTrue(os.path.exists(os.path.join(self.runs, "summary.csv")))

    def test_config_file_and_flag_override(self):
        self._split()
        cfg = os.path.join(self.tmp, "run.cfg")
        run = os.path.join(self.runs, "lower")
        with open(cfg, "w") as f:
            f.write(f"dataset = {self.stream}\nstrategy = lower\noutput_dir = {run}\nepochs = 50\n")
        code, _ = self._main(["train", "--config", cfg] + TINY)
        self.assertEqual(code, 0)
        with open(os.path.join(run, "config.json")) as f:
            saved = json.load(f)
        self.assertEqual(saved["strategy"], "lower")
        self.assertEqual(saved["model"]["epochs"], 1)

    def test_unknown_setting(self):
        cfg = os.path.join(self.tmp, "run.cfg")
        with open(cfg, "w") as f:
            f.write("learning_rate = 0.1\n")
        code, _ = self._main(["train", "--config", cfg, "--stream", self.stream])
        self.assertEqual(code, 2)

    def test_invalid_model_config(self):
        code, _ = self._main(["train", "--stream", self.stream, "--K", "3", "--d", "4"])
        self.assertEqual(code, 2)

    def test_missing_stream(self):
        code, _ = self._main(["train", "--stream", os.path.join(self.tmp, "nowhere"),
                              "--out", os.path.join(self.runs, "x")] + TINY)
        self.assertEqual(code, 3)

    def test_no_stream_given(self):
        code, _ = self._main(["train"] + TINY)
        self.assertEqual(code, 2)

    def test_report_without_runs(self):
        os.makedirs(self.runs)
        code, _ = self._main(["report", "--runs", self.runs])
        self.assertEqual(code, 3)

    def test_bad_log_level(self):
        with patch.dict(os.environ, {"CGRL_LOG_LEVEL": "CHATTY"}):
            code, _ = self._main(["report", "--runs", self.runs])
        self.assertEqual(code, ConfigError.exit_code)

    def test_model_flags_exist(self):
        args = build_parser().parse_args(["train", "--memory-budget", "5", "--audit-activations", "true"])
        self.assertEqual((args.memory_budget, args.audit_activations), ("5", "true"))


if __name__ == '__main__':
    unittest.main()
