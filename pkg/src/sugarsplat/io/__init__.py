from .archive import read_archive, write_archive
from .config import ConfigDocument, default_config, dump_config, load_config, parse_config, with_overrides
from .images import read_pfm, read_png, write_pfm, write_png
from .logs import RunLog, read_log
from .obj import read_obj, write_obj
from .ply import read_bound, read_cloud, read_ply, read_positions, write_bound, write_cloud, write_positions

__all__ = [
    "ConfigDocument", "RunLog", "default_config", "dump_config", "load_config", "parse_config", "read_archive",
    "read_bound", "read_cloud", "read_log", "read_obj", "read_pfm", "read_ply", "read_png", "read_positions",
    "with_overrides", "write_archive", "write_bound", "write_cloud", "write_obj", "write_pfm", "write_png",
    "write_positions",
]
