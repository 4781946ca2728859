import hashlib
import json
import logging
import os
import uuid
from datetime import datetime

logger = logging.getLogger(__name__)


def config_hash(config: dict) -> str:
    """Hash of a run configuration, independent of key order."""
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


class RunDatabase:
    """Registry of the runs executed in a workspace, so results stay traceable to the configuration and engine
    version that produced them."""
    timestamp_format = '%Y-%m-%d_%H-%M-%S'

    db_location: str
    run_db: dict

    def __init__(self, workspace_path: str):
        """Either create or load the registry

        :param workspace_path: path to the workspace folder
        :type workspace_path: str"""
        self.db_location = os.path.join(workspace_path, 'storage')

        if not os.path.isfile(self.run_db_path):
            self._initialize_database()

        self._load_database()

    def store_run_information(self, command, config, seed, version, output=None, run_start_time=None):
        """Add a run to the registry and return its id"""
        run = dict()

        run_id = str(uuid.uuid4())
        run['timestamp'] = datetime.strftime(datetime.now(), self.timestamp_format)
        run['run_start_time'] = datetime.strftime(run_start_time or datetime.now(), self.timestamp_format)
        run['command'] = command
        run['config_hash'] = config_hash(config)
        run['seed'] = seed
        run['version'] = version
        run['output'] = output
        run['exit_code'] = None

        self.run_db[run_id] = run
        self._dump_database()
        logger.debug(f"Registered run {run_id} ({command})")
        return run_id

    def mark_run_as_finished(self, run_id, exit_code):
        """Record the exit code of a run"""
        self.run_db[run_id]['exit_code'] = exit_code
        self._dump_database()

    def get_run_data(self, field, run_id):
        """Get data for a certain run identified by a run_id.

        :param field: data of interest (e.g. 'config_hash')
        :type field: str
        :param run_id: run_id of run of interest
        :type run_id: str
        """
        if run_id in self.run_db:
            return self.run_db[run_id][field]
        else:
            return None

    def find_runs(self, config_hash_value: str) -> list:
        """Ids of all runs made with a configuration"""
        return [run_id for run_id, run in self.run_db.items() if run['config_hash'] == config_hash_value]

    @property
    def run_db_path(self):
        return os.path.join(self.db_location, 'run_db.json')

    def _initialize_database(self):
        os.makedirs(self.db_location, exist_ok=True)

        with open(self.run_db_path, 'w') as f:
            f.write('{}')

    def _load_database(self):
        with open(self.run_db_path, 'r') as f:
            self.run_db = json.load(f)

    def _dump_database(self):
        with open(self.run_db_path, 'w') as f:
            json.dump(self.run_db, f, indent=4)
