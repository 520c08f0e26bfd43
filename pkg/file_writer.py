"""
File Writer - Saves run outputs (tables, images, run logs) under the results root.
"""

import io
import os
import json
import asyncio
import logging
import aiofiles
from typing import Dict, List, Optional, Union
from datetime import datetime

import pandas as pd
from PIL import Image

from spatial.settings import output_root

logger = logging.getLogger(__name__)

Content = Union[str, bytes]


class FileWriter:
    """Handles writing run outputs to disk."""

    def __init__(self, output_dir: Optional[str] = None):
        self.output_dir = output_dir or output_root()
        self.created_directories = set()
        self.written_files = []

    async def write_file(self, file_path: str, content: Content) -> bool:
        """Write a single text or binary file; parent directories are created."""
        try:
            directory = os.path.dirname(file_path)
            if directory and directory not in self.created_directories:
                os.makedirs(directory, exist_ok=True)
                self.created_directories.add(directory)

            if isinstance(content, bytes):
                async with aiofiles.open(file_path, 'wb') as f:
                    await f.write(content)
            else:
                async with aiofiles.open(file_path, 'w', encoding='utf-8', newline='') as f:
                    await f.write(content)

            self.written_files.append(file_path)
            return True

        except OSError as e:
            logger.error(f"Error writing file {file_path}: {e}")
            return False

    async def write_files(self, files: Dict[str, Content], base_path: Optional[str] = None) -> List[str]:
        """Write several files concurrently; returns the paths that were written."""
        if base_path:
            os.makedirs(base_path, exist_ok=True)

        paths = [os.path.join(base_path, p) if base_path else p for p in files]
        results = await asyncio.gather(*(self.write_file(path, content)
                                         for path, content in zip(paths, files.values())),
                                       return_exceptions=True)
        return [path for path, result in zip(paths, results) if result is True]

    async def save_run_log(self, run_path: str, log_data: Dict) -> bool:
        """Save the run configuration and timings next to the outputs."""
        log_path = os.path.join(run_path, 'run_log.json')
        return await self.write_file(log_path, json.dumps(log_data, indent=2, default=str))

    def get_run_info(self, run_path: str) -> Dict:
        """Summary of a results directory."""
        if not os.path.exists(run_path):
            return {}

        files = []
        for root, _, names in os.walk(run_path):
            files.extend(os.path.relpath(os.path.join(root, n), run_path) for n in names)
        return {
            'run_name': os.path.basename(run_path),
            'run_path': run_path,
            'created_at': datetime.fromtimestamp(os.path.getctime(run_path)).isoformat(),
            'file_count': len(files),
            'files': sorted(files),
        }

    def list_runs(self) -> List[Dict]:
        """Every scenario directory under the output root, newest first."""
        if not os.path.exists(self.output_dir):
            return []

        runs = []
        for item in os.listdir(self.output_dir):
            item_path = os.path.join(self.output_dir, item)
            if os.path.isdir(item_path):
                runs.append(self.get_run_info(item_path))
        runs.sort(key=lambda x: x.get('created_at', ''), reverse=True)
        return runs


def table_to_csv(table: pd.DataFrame) -> str:
    return table.to_csv(index=False, lineterminator='\n')


def image_to_ppm(image: Image.Image) -> bytes:
    buffer = io.BytesIO()
    image.convert('RGB').save(buffer, format='PPM')
    return buffer.getvalue()
