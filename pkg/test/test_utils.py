import json
import logging
import shutil
import unittest
import tempfile
import warnings
from pathlib import Path

import jsonpickle
import numpy as np

from spinbath.utils import (get_logger, LoggingObject, safe_json_dump, load_obj_from_json_file, set_log_level,
                            format_float, write_csv, read_csv_columns)


class TestUtils(unittest.TestCase):

    def setUp(self) -> None:
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self) -> None:
        shutil.rmtree(self.test_dir)

    def test_safe_json_dump(self):
        test_json_file = self.test_dir.joinpath("test_json.json")
        test_obj = {"T2_s": 1.2e-3, "label": "Yb171_site2"}
        safe_json_dump(test_json_file, test_obj)
        self.assertTrue(test_json_file.exists())
        self.assertFalse(self.test_dir.joinpath("test_json.json_safe").exists())
        with open(test_json_file, "r") as f:
            self.assertEqual(jsonpickle.decode(f.read()), test_obj)
        test_json_file.unlink()
        safe_json_dump(str(test_json_file), test_obj)
        self.assertEqual(load_obj_from_json_file(test_json_file), test_obj)

    def test_plain_json_dump_is_quiet(self):
        test_json_file = self.test_dir.joinpath("plain.json")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            safe_json_dump(test_json_file, {"names": ["A0", "R"], "derived": {"product": [1.3e5, 2e3]}},
                           unpicklable=False)
        self.assertEqual([w for w in caught if issubclass(w.category, DeprecationWarning)], [])
        with open(test_json_file, "r") as f:
            self.assertEqual(json.load(f), {"names": ["A0", "R"], "derived": {"product": [1.3e5, 2e3]}})

    def test_get_logger(self):
        logger_name = "test_logger"
        level = logging.DEBUG
        logger = get_logger(logger_name, level)
        self.assertEqual(logger.name, logger_name)
        self.assertEqual(logger.level, level)

        # default level
        logger = get_logger(logger_name)
        self.assertEqual(logger.level, logging.INFO)
        # None parameters
        with self.assertRaises(ValueError):
            get_logger(None, level)
        with self.assertRaises(ValueError):
            get_logger(logger_name, None)

    def test_set_log_level(self):
        logger = get_logger("level_test")
        set_log_level(logging.WARNING)
        self.assertEqual(logger.level, logging.WARNING)
        set_log_level(logging.INFO)
        self.assertEqual(logger.level, logging.INFO)

    def test_logging_object(self):
        logging_object = LoggingObject()
        self.assertEqual(logging_object.logger.name, type(logging_object).__name__)

        class LoggingObjectSubclass(LoggingObject):
            pass

        logging_object = LoggingObjectSubclass()
        self.assertEqual(logging_object.logger.name, LoggingObjectSubclass.__name__)

    def test_format_float(self):
        for value in (0.1, 1 / 3, 6.02214076e23, -2.5e-300):
            self.assertEqual(float(format_float(value)), value)
        self.assertEqual(format_float(np.float64(0.5)), "0.5")

    def test_csv(self):
        path = self.test_dir.joinpath("data.csv")
        write_csv(path, ["tau_s", "amplitude_V", "label"], [[1e-5, 1 / 3, "a"], [2e-5, 0.25, "b"]])
        with open(path) as f:
            self.assertEqual(f.readline().strip(), "tau_s,amplitude_V,label")
        columns = read_csv_columns(path, ["tau_s", "amplitude_V"], ["sigma_V"])
        self.assertEqual(set(columns), {"tau_s", "amplitude_V"})
        np.testing.assert_array_equal(columns["amplitude_V"], [1 / 3, 0.25])
        with self.assertRaises(ValueError):
            read_csv_columns(path, ["tw_s"])
        with self.assertRaises(ValueError):
            read_csv_columns(path, ["label"])


if __name__ == '__main__':
    unittest.main()
