import csv
import logging
import shutil
import sys
from logging import Logger
from pathlib import Path
from typing import Union, Any, Dict, Iterable, List, Sequence

import jsonpickle
import numpy as np

_LOGGERS: Dict[str, Logger] = {}


def safe_json_dump(fpath: Union[str, Path], obj: Any, unpicklable: bool = True) -> None:
    """
    Utility function used to avoid json file corruption in case of abrupt termination of the script
    :param fpath: path where the json has to be saved
    :param obj: the content to be saved
    :param unpicklable: if False, writes plain json without the jsonpickle type tags
    """
    if issubclass(type(fpath), Path):
        fpath = str(fpath)
    safe_path = fpath + "_safe"
    with open(safe_path, "w") as f:
        json_str = jsonpickle.dumps(obj, indent=4, unpicklable=unpicklable, keys=False)
        f.write(json_str)
    shutil.move(safe_path, fpath)


def load_obj_from_json_file(fpath: Union[str, Path]) -> Any:
    """
    Reads back an object stored with safe_json_dump
    :param fpath: the json file
    :return: the decoded object
    """
    with open(fpath, "r") as f:
        str_result = f.read()
        result = jsonpickle.decode(str_result)
    return result


def get_logger(name: str, level: int = logging.INFO) -> Logger:
    """
    Creates a logger writing to stderr, so stdout stays free for machine-readable output
    :param name: the logger name
    :param level: the logging level
    :return: the logger
    """
    if name is None or level is None:
        raise ValueError("name and level must not be None!")
    logger = Logger(name)
    logger.setLevel(level)
    handler = logging.StreamHandler(sys.stderr)
    formatter = logging.Formatter('[%(asctime)s|%(name)s|%(levelname)s] %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    _LOGGERS[name] = logger
    return logger


def set_log_level(level: int) -> None:
    """
    Changes the level of every logger created through get_logger
    :param level: the new logging level
    """
    for logger in _LOGGERS.values():
        logger.setLevel(level)


class LoggingObject(object):
    """
    Object that comes equipped with a logger
    """
    logger: Logger

    def __init__(self):
        self.logger = _LOGGERS.get(type(self).__name__) or get_logger(type(self).__name__)


def format_float(value: float) -> str:
    """
    Formats a float with 17 significant digits, enough for an exact round-trip
    """
    return format(float(value), ".17g")


def write_csv(fpath: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """
    Writes a csv file. Floats are written with 17 significant digits, anything else with str()
    :param fpath: destination file
    :param header: column names, SI units included
    :param rows: the data rows
    """
    with open(fpath, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else str(v) for v in row])


def read_csv_columns(fpath: Union[str, Path], required: Sequence[str],
                     optional: Sequence[str] = ()) -> Dict[str, np.ndarray]:
    """
    Reads the named numeric columns of a csv file with a header row
    :param fpath: the csv file
    :param required: columns that must be present
    :param optional: columns read if present
    :return: column name -> float array
    """
    with open(fpath, "r", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ValueError(f"File {fpath} is empty, a header row is needed.")
        fieldnames = [name.strip() for name in reader.fieldnames]
        missing = [name for name in required if name not in fieldnames]
        if missing:
            raise ValueError(f"File {fpath} misses the columns {missing}. Found {fieldnames}.")
        wanted = list(required) + [name for name in optional if name in fieldnames]
        columns: Dict[str, List[float]] = {name: [] for name in wanted}
        for line_number, row in enumerate(reader, start=2):
            row = {key.strip(): value for key, value in row.items() if key is not None}
            for name in wanted:
                try:
                    columns[name].append(float(row[name]))
                except (TypeError, ValueError):
                    raise ValueError(f"{fpath}:{line_number}: column '{name}' holds a non-numeric value "
                                     f"{row[name]!r}.")
    return {name: np.asarray(values, dtype=float) for name, values in columns.items()}
