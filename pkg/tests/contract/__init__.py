# Contract tests package

